"""Slow, independent oracles backing the test suite.

Every closed form in the library gets checked against a value computed by a
deliberately different route: adaptive quadrature instead of Beta-function
algebra, dense linear solves instead of dynamic programming, and exhaustive
enumeration of colourings instead of falling-factorial weights. Nothing here
is public API and nothing here needs to be fast.
"""

import itertools
import math
from functools import lru_cache

import numpy as np
from scipy import integrate


def density_and_atoms(family):
    """(density callable | None, [(atom location, mass), ...]) for a family."""
    kind = family.kind
    if kind == "kingman":
        return None, [(0.0, 1.0)]
    if kind == "star":
        return None, [(1.0, 1.0)]
    if kind == "bs":
        return (lambda x: 1.0), []
    if kind == "beta":
        al = family.alpha
        norm = math.gamma(2.0 - al) * math.gamma(al)  # over gamma(2) = 1
        return (lambda x: x ** (1.0 - al) * (1.0 - x) ** (al - 1.0) / norm), []
    if kind == "pointmass":
        return None, [(family.psi, 1.0)]
    if kind == "twoatom":
        w = family.psi**2 / (2.0 + family.psi**2)
        return None, [(0.0, 1.0 - w), (family.psi, w)]
    raise AssertionError(f"no oracle for family kind {kind!r}")


def _measure_integral(family, f, f_at_zero):
    """Integral of f against the family's measure; f_at_zero is lim f(x), x->0."""
    dens, atoms = density_and_atoms(family)
    val = 0.0
    for x0, mass in atoms:
        val += mass * (f_at_zero if x0 == 0.0 else f(x0))
    if dens is not None:
        part, _ = integrate.quad(lambda x: f(x) * dens(x), 0.0, 1.0, limit=200)
        val += part
    return val


def quad_lambda_rate(family, m, k):
    """lambda_{m,k} = integral of x^(k-2) (1-x)^(m-k), via quadrature.

    The integrand tends to 1 at x -> 0 exactly when k = 2, which is the value
    the atom at zero must pick up.
    """
    a, c = k - 2, m - k
    return _measure_integral(
        family,
        lambda x: x**a * (1.0 - x) ** c,
        1.0 if a == 0 else 0.0,
    )


def quad_total_merge_rate(family, m):
    return sum(math.comb(m, k) * quad_lambda_rate(family, m, k) for k in range(2, m + 1))


# ---------------------------------------------------------------------------
# Dense linear-algebra oracles for the block-counting chain.


def level_rate_matrix(family, n):
    """Generator of the block-counting chain over transient levels 2..n.

    Row/column index m - 2 holds level m; jumps to the absorbing level 1 only
    show up in the diagonal. Rates come from the quadrature oracle.
    """
    size = n - 1
    Q = np.zeros((size, size))
    for m in range(2, n + 1):
        row = m - 2
        for k in range(2, m + 1):
            rate = math.comb(m, k) * quad_lambda_rate(family, m, k)
            if rate == 0.0:
                continue
            Q[row, row] -= rate
            j = m - k + 1
            if j >= 2:
                Q[row, j - 2] += rate
    return Q


def green_by_linear_solve(family, n):
    """g(a, m) for 2 <= m, a <= n as the fundamental matrix of the level chain.

    Entry [a - 2, m - 2] is the expected time at level m starting from a;
    no dynamic programming involved, just one dense inverse.
    """
    return np.linalg.inv(-level_rate_matrix(family, n))


@lru_cache(maxsize=None)
def _partitions_desc(n, cap=None):
    """Integer partitions of n as nonincreasing tuples."""
    if cap is None:
        cap = n
    if n == 0:
        return ((),)
    out = []
    for first in range(min(n, cap), 0, -1):
        for rest in _partitions_desc(n - first, first):
            out.append((first,) + rest)
    return tuple(out)


def partition_chain_branch_lengths(family, n):
    """E[B_b], b = 1..n-1, by a dense solve over the block-size-multiset chain.

    States are nonincreasing tuples of block sizes. Any specific set of k of
    the m current blocks merges at rate lambda_{m,k} (quadrature); expected
    state occupation times come from the fundamental matrix, and E[B_b] sums
    occupation time weighted by how many size-b blocks each state carries.
    Bypasses the Green function, the p-table, and the marginalised recursion
    entirely. Only sensible for small n.
    """
    states = [p for p in _partitions_desc(n) if len(p) >= 2]
    index = {p: i for i, p in enumerate(states)}
    Q = np.zeros((len(states), len(states)))
    for p, i in index.items():
        m = len(p)
        for k in range(2, m + 1):
            lam = quad_lambda_rate(family, m, k)
            if lam == 0.0:
                continue
            for subset in itertools.combinations(range(m), k):
                chosen = set(subset)
                merged = sum(p[j] for j in subset)
                rest = [p[j] for j in range(m) if j not in chosen]
                target = tuple(sorted(rest + [merged], reverse=True))
                Q[i, i] -= lam
                if len(target) >= 2:
                    Q[i, index[target]] += lam
    N = np.linalg.inv(-Q)
    start = index[tuple([1] * n)]
    eb = np.zeros(n - 1)
    for p, i in index.items():
        t = N[start, i]
        for size in p:
            eb[size - 1] += t
    return eb


def fu_family_size_probability(n, k, b):
    """Kingman: chance that one of the k branches at level k subtends b leaves.

    The classic urn argument: the b leaves below the branch and the other
    n - b leaves must interleave in one of C(n-b-1, k-2) / C(n-1, k-1) ways.
    """
    if b < 1 or b > n - k + 1:
        return 0.0
    return math.comb(n - b - 1, k - 2) / math.comb(n - 1, k - 1)


# ---------------------------------------------------------------------------
# Four-fold colouring oracles, by exhaustive enumeration over colour counts.

_FALLING = (1.0, 4.0, 12.0, 24.0, 24.0)  # 4!/(4-j)!


@lru_cache(maxsize=None)
def colouring_census(b):
    """Exact colouring statistics for b labelled blocks.

    Each block independently takes one of four colours (probability x/4 each)
    or stays uncoloured. The census maps (merge pattern, #coloured) to the
    number of colour assignments producing it, where the merge pattern is the
    nonincreasing tuple of colour-class sizes >= 2 (empty tuple: no merger).
    Assignments are grouped by the per-colour counts, so the enumeration is
    polynomial in b rather than 5^b.
    """
    census = {}
    for s1 in range(b + 1):
        for s2 in range(b - s1 + 1):
            for s3 in range(b - s1 - s2 + 1):
                for s4 in range(b - s1 - s2 - s3 + 1):
                    u = b - s1 - s2 - s3 - s4
                    count = math.factorial(b) // (
                        math.factorial(s1)
                        * math.factorial(s2)
                        * math.factorial(s3)
                        * math.factorial(s4)
                        * math.factorial(u)
                    )
                    groups = tuple(sorted((s for s in (s1, s2, s3, s4) if s >= 2), reverse=True))
                    key = (groups, b - u)
                    census[key] = census.get(key, 0) + count
    return census


def _class_mass_poly(b, groups):
    """[(#coloured, assignment count), ...] for one merge-pattern class."""
    return [(t, c) for (g, t), c in colouring_census(b).items() if g == tuple(groups)]


def patterns_in_class(b, groups):
    """How many ways b labelled blocks realise unordered group sizes `groups`."""
    count = math.factorial(b) // math.factorial(b - sum(groups))
    for k in groups:
        count //= math.factorial(k)
    for _, mult in itertools.groupby(sorted(groups)):
        count //= math.factorial(len(tuple(mult)))
    return count


def xi_pattern_rate_oracle(family, b, groups):
    """Rate of one specific simultaneous-merger pattern, via the census.

    P(class | x) is a polynomial in x read off the census; the non-atomic
    part integrates (4 / x^2) P(class | x) against the measure and divides by
    the number of equally likely patterns in the class. The atom at zero only
    feeds single pair mergers.
    """
    groups = tuple(sorted(groups, reverse=True))
    poly = _class_mass_poly(b, groups)

    def class_given_x(x):
        return sum(c * (x / 4.0) ** t * (1.0 - x) ** (b - t) for t, c in poly)

    dens, atoms = density_and_atoms(family)
    class_rate = 0.0
    atom_rate = 0.0
    for x0, mass in atoms:
        if x0 == 0.0:
            if groups == (2,):
                atom_rate += mass  # the atom feeds each specific pair directly
        else:
            class_rate += mass * 4.0 * class_given_x(x0) / x0**2
    if dens is not None:
        part, _ = integrate.quad(
            lambda x: 4.0 * class_given_x(x) / x**2 * dens(x), 0.0, 1.0, limit=200
        )
        class_rate += part
    return class_rate / patterns_in_class(b, groups) + atom_rate


def xi_level_rate_oracle(family, b, j):
    """Rate of the four-fold block count jumping from b to j, via the census."""
    drop = b - j
    rate = 0.0
    seen = set()
    for g, _ in colouring_census(b).items():
        groups = g[0]
        if groups and groups not in seen and sum(k - 1 for k in groups) == drop:
            seen.add(groups)
            rate += xi_pattern_rate_oracle(family, b, groups) * patterns_in_class(b, groups)
    return rate


def xi_green_by_linear_solve(family, n):
    """Four-fold analogue of green_by_linear_solve, census rates throughout."""
    size = n - 1
    Q = np.zeros((size, size))
    for b in range(2, n + 1):
        for j in range(1, b):
            rate = xi_level_rate_oracle(family, b, j)
            if rate == 0.0:
                continue
            Q[b - 2, b - 2] -= rate
            if j >= 2:
                Q[b - 2, j - 2] += rate
    return np.linalg.inv(-Q)


def xi_total_length_oracle(family, n):
    g = xi_green_by_linear_solve(family, n)
    ks = np.arange(2, n + 1, dtype=float)
    return float(ks @ g[n - 2])


def no_collision_probability(b, x):
    """P(no colour lands on two or more of b blocks) at per-colour probability x/4.

    At most four blocks can be coloured without a collision, each colour used
    at most once: choose which j blocks, assign distinct colours in (4)_j
    ordered ways.
    """
    total = 0.0
    for j in range(0, min(4, b) + 1):
        total += math.comb(b, j) * _FALLING[j] * (x / 4.0) ** j * (1.0 - x) ** (b - j)
    return total

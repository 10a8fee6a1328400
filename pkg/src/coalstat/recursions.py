"""Deterministic genealogy tables: block counts, Green functions, expected spectra.

Everything here is exact linear algebra on the block-counting chain of a
measure-driven coalescent. The chain jumps from i lineages to j < i at rate
binomial(i, i-j+1) * rate(i, i-j+1). Three tables are derived from it:

* the Green function g(a, m), the expected time spent with m lineages when
  starting from a;
* the conditional family-size table p[k, b], the probability that a block
  picked uniformly at the time the chain sits at k lineages subtends b sample
  members (computed by the two-term descending recursion over sub-sample
  sizes);
* the expected branch lengths E[B_b] carried by size-b families, from which
  the expected site-frequency spectrum is E[xi_b] = theta/2 * E[B_b].

E[B_b] equals sum_k p[k, b] * k * g(n, k) but is computed by the equivalent
marginalised recursion (multiply the p recursion by g(n, k), weight by k, sum
over k; the conditioning weights telescope), which is O(n^3) overall and keeps
sample sizes in the hundreds cheap. The unmarginalised route stays available
through :func:`p_table` and the two are cross-checked in the test suite.

Exponential population growth on the Kingman base changes only the waiting
times, not which blocks merge, so its expected spectrum reuses the Kingman
p table together with Monte Carlo level occupation times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, UnsupportedModelError
from .measures import (
    KINGMAN,
    CoalescentModel,
    LambdaFamily,
    lambda_model,
    log_binom,
    merger_weight_row,
)

DEFAULT_GROWTH_REPLICATES = 100_000

# Entropy prefix for the deterministic default seed of growth level-time
# estimates; combined with (beta bits, n, replicates) so repeated calls agree.
_GROWTH_SEED_TAG = 0x6C0A157A


def _as_lambda_family(model, op: str) -> LambdaFamily:
    """Accept a LambdaFamily or a plain-Lambda model; growth at rate 0 counts as Kingman."""
    if isinstance(model, LambdaFamily):
        return model
    if isinstance(model, CoalescentModel):
        if model.is_lambda:
            return model.family
        if model.is_growth and model.growth_rate == 0.0:
            return KINGMAN
        raise UnsupportedModelError(f"{op} is defined for plain measure-driven models, not {model}")
    raise UnsupportedModelError(f"{op} expects a model or family, got {type(model).__name__}")


def _check_n(n: int) -> int:
    n = int(n)
    if n < 2:
        raise ArgumentError(f"sample size must be >= 2, got {n}")
    return n


@dataclass(frozen=True)
class JumpRates:
    """Outgoing rates of the block-counting chain at i lineages.

    ``rates[j-1]`` is the rate of jumping to j lineages (j = 1..i-1),
    ``total`` their sum, and ``skeleton`` the jump probabilities.
    """

    i: int
    rates: np.ndarray
    total: float
    skeleton: np.ndarray


def bc_jump_rates(model, i: int) -> JumpRates:
    family = _as_lambda_family(model, "bc_jump_rates")
    i = int(i)
    if i < 2:
        raise ArgumentError(f"need at least 2 lineages, got {i}")
    w = merger_weight_row(family, i)  # k-merger weights, k = 2..i
    rates = w[::-1].copy()  # target j = i - k + 1, ascending j = 1..i-1
    total = float(rates.sum())
    return JumpRates(i=i, rates=rates, total=total, skeleton=rates / total)


def _skeleton_rows(family: LambdaFamily, n: int):
    """Jump probability rows and total rates for i = 2..n.

    rows[i][j-1] = P(next block count is j | currently i), totals[i] = exit rate.
    """
    rows: list[np.ndarray | None] = [None] * (n + 1)
    totals = np.zeros(n + 1)
    for i in range(2, n + 1):
        w = merger_weight_row(family, i)
        tot = w.sum()
        rows[i] = w[::-1] / tot
        totals[i] = tot
    return rows, totals


def _green_from_rows(rows, totals, n: int) -> np.ndarray:
    """Green table for any decreasing block-count chain given its skeleton."""
    G = np.zeros((n + 1, n + 1))
    for a in range(2, n + 1):
        if a > 2:
            # First-jump decomposition: g(a, m) = sum_j P(a -> j) g(j, m).
            G[a, 2:a] = rows[a][1:] @ G[2:a, 2:a]
        G[a, a] = 1.0 / totals[a]
    return G


def green_function(model, n: int) -> np.ndarray:
    """Green function table G with G[a, m] = g(a, m) for 2 <= m <= a <= n.

    Entries outside that triangle are zero. g(a, m) is the expected total time
    the chain started from a spends with exactly m lineages.
    """
    family = _as_lambda_family(model, "green_function")
    n = _check_n(n)
    rows, totals = _skeleton_rows(family, n)
    return _green_from_rows(rows, totals, n)


@dataclass(frozen=True)
class PTable:
    """Conditional family-size table at sample size n.

    ``p[k, b]`` is the probability that a block drawn uniformly while the
    chain (started from n) has k blocks subtends b leaves. Rows with
    ``reachable[k]`` false correspond to block counts the chain cannot visit
    (their g(n, k) is zero) and hold NaN.
    """

    n: int
    p: np.ndarray
    reachable: np.ndarray


def p_table(model, n: int) -> PTable:
    family = _as_lambda_family(model, "p_table")
    n = _check_n(n)
    rows, totals = _skeleton_rows(family, n)
    G = green_function(family, n)
    P = np.full((n + 1, n + 1), np.nan)
    reachable = np.zeros(n + 1, dtype=bool)
    reachable[n] = True
    P[n] = 0.0
    P[n, 1] = 1.0
    for k in range(2, n):
        if G[n, k] == 0.0:
            continue
        reachable[k] = True
        # T[a, b] is the table at sub-sample size a for this k; b <= a - k + 1.
        T = np.zeros((n + 1, n - k + 2))
        T[k, 1] = 1.0
        for a in range(k + 1, n + 1):
            if G[a, k] == 0.0:
                continue
            acc = np.zeros(a - k + 2)
            pj = rows[a]
            for m in range(k, a):
                if G[m, k] == 0.0:
                    continue
                w = pj[m - 1] * G[m, k] / G[a, k]
                if w == 0.0:
                    continue
                src = T[m, 1 : m - k + 2]
                bp = np.arange(1.0, m - k + 2)
                d = a - m
                # The merger of a -> m absorbed d + 1 old blocks into one: the
                # tagged block either contains the merged family (shift term)
                # or is one of the m - 1 untouched blocks (stay term).
                acc[d + 1 : d + m - k + 2] += w * (bp / m) * src
                acc[1 : m - k + 2] += w * ((m - bp) / m) * src
            T[a, : a - k + 2] = acc
        P[k] = 0.0
        P[k, 1 : n - k + 2] = T[n, 1 : n - k + 2]
    return PTable(n=n, p=P, reachable=reachable)


def kingman_p_closed_form(n: int) -> np.ndarray:
    """Kingman's family-size table in closed form: p[k, b] = C(n-b-1, k-2)/C(n-1, k-1)."""
    n = _check_n(n)
    k = np.arange(2, n + 1, dtype=float)[:, None]
    b = np.arange(1, n + 1, dtype=float)[None, :]
    with np.errstate(invalid="ignore"):
        logs = log_binom(n - b - 1.0, k - 2.0) - log_binom(n - 1.0, k - 1.0)
    P = np.zeros((n + 1, n + 1))
    P[2:, 1:] = np.where(np.isneginf(logs), 0.0, np.exp(logs))
    return P


def _lambda_branch_lengths(family: LambdaFamily, n: int) -> np.ndarray:
    """E[B_b] for b = 1..n-1 via the k-marginalised two-term recursion."""
    rows, totals = _skeleton_rows(family, n)
    EB = np.zeros((n + 1, n))
    EB[2, 1] = 2.0 / totals[2]
    for a in range(3, n + 1):
        acc = np.zeros(a)
        pj = rows[a]
        for m in range(2, a):
            w = pj[m - 1]
            if w == 0.0:
                continue
            src = EB[m, 1:m]
            bp = np.arange(1.0, m)
            d = a - m
            acc[d + 1 : d + m] += w * (bp / m) * src
            acc[1:m] += w * ((m - bp) / m) * src
        # All a blocks are singletons during the first sojourn.
        acc[1] += a / totals[a]
        EB[a, :a] = acc
    return EB[n, 1:n]


def _growth_seed_sequence(beta: float, n: int, replicates: int) -> np.random.SeedSequence:
    beta_bits = int(np.float64(beta).view(np.uint64))
    return np.random.SeedSequence(entropy=(_GROWTH_SEED_TAG, beta_bits, n, replicates))


@dataclass(frozen=True)
class LevelTimes:
    """Monte Carlo level occupation times E[T_k] for k = 2..n (index k-2)."""

    n: int
    beta: float
    mean: np.ndarray
    se: np.ndarray
    replicates: int


def expected_level_times_growth(
    beta: float,
    n: int,
    replicates: int = DEFAULT_GROWTH_REPLICATES,
    seed=None,
) -> LevelTimes:
    """Estimate E[T_k] under Kingman with exponential growth at rate beta.

    Population size at time s back is proportional to exp(-beta s), so the
    pair-merger hazard accelerates as exp(beta s). Writing u = exp(beta t), the
    exit from level k satisfies u' = u + beta * E / C(k, 2) with E ~ Exp(1); a
    replicate is therefore one cumulative sum. With beta = 0 the homogeneous
    exponential clocks are used directly. The default seed is derived
    deterministically from (beta, n, replicates) so repeated calls agree.
    """
    if not (beta >= 0.0) or not math.isfinite(beta):
        raise ArgumentError(f"growth rate must be finite and >= 0, got {beta!r}")
    n = _check_n(n)
    replicates = int(replicates)
    if replicates < 1:
        raise ArgumentError(f"need at least 1 replicate, got {replicates}")
    if seed is None:
        ss = _growth_seed_sequence(beta, n, replicates)
    elif isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)

    levels = np.arange(n, 1, -1, dtype=float)  # time order: n, n-1, .., 2
    pair_rates = levels * (levels - 1.0) / 2.0
    sums = np.zeros(n - 1)
    sumsq = np.zeros(n - 1)
    chunk = max(1, min(replicates, 8_000_000 // n))
    done = 0
    while done < replicates:
        rows = min(chunk, replicates - done)
        E = rng.standard_exponential((rows, n - 1))
        if beta == 0.0:
            T = E / pair_rates
        else:
            u = 1.0 + beta * np.cumsum(E / pair_rates, axis=1)
            T = np.diff(np.log(u), axis=1, prepend=0.0) / beta
        sums += T.sum(axis=0)
        sumsq += (T * T).sum(axis=0)
        done += rows
    mean = sums / replicates
    if replicates > 1:
        var = np.maximum(sumsq - replicates * mean**2, 0.0) / (replicates - 1)
        se = np.sqrt(var / replicates)
    else:
        se = np.full(n - 1, np.nan)
    # Reverse into ascending k = 2..n.
    return LevelTimes(n=n, beta=beta, mean=mean[::-1].copy(), se=se[::-1].copy(), replicates=replicates)


def expected_branch_lengths(
    model,
    n: int,
    *,
    growth_replicates: int = DEFAULT_GROWTH_REPLICATES,
    growth_seed=None,
) -> np.ndarray:
    """E[B_b] for b = 1..n-1: expected branch length subtending b sample members."""
    n = _check_n(n)
    if isinstance(model, LambdaFamily):
        return _lambda_branch_lengths(model, n)
    if not isinstance(model, CoalescentModel):
        raise UnsupportedModelError(
            f"expected_branch_lengths expects a model or family, got {type(model).__name__}"
        )
    if model.is_lambda:
        return _lambda_branch_lengths(model.family, n)
    if model.is_growth:
        if model.growth_rate == 0.0:
            return _lambda_branch_lengths(KINGMAN, n)
        lt = expected_level_times_growth(model.growth_rate, n, growth_replicates, growth_seed)
        PK = kingman_p_closed_form(n)
        ks = np.arange(2, n + 1, dtype=float)
        return PK[2:, 1:n].T @ (ks * lt.mean)
    raise UnsupportedModelError(
        f"expected branch lengths for {model} require simulation; deterministic tables cover "
        "plain and growth models only"
    )


def expected_sfs(model, n: int, theta: float, *, folded: bool = False, **growth_kwargs) -> np.ndarray:
    """Expected site-frequency spectrum E[xi_b] = theta/2 * E[B_b] (optionally folded)."""
    if not (theta >= 0.0) or not math.isfinite(theta):
        raise ArgumentError(f"theta must be finite and >= 0, got {theta!r}")
    xi = 0.5 * theta * expected_branch_lengths(model, n, **growth_kwargs)
    return fold(xi) if folded else xi


def phi(model, n: int, **growth_kwargs) -> np.ndarray:
    """Normalised expected spectrum phi_b = E[B_b] / E[B]; sums to one."""
    eb = expected_branch_lengths(model, n, **growth_kwargs)
    return eb / eb.sum()


def expected_total_length(model, n: int, **growth_kwargs) -> float:
    """Expected total branch length E[B] (root block excluded)."""
    return float(expected_branch_lengths(model, n, **growth_kwargs).sum())


def fold(xi) -> np.ndarray:
    """Fold a spectrum over b = 1..n-1 into minor-allele classes 1..floor(n/2)."""
    xi = np.asarray(xi)
    n = xi.shape[-1] + 1
    half = n // 2
    eta = xi[..., :half].astype(float).copy()
    for i in range(1, half + 1):
        if i != n - i:
            eta[..., i - 1] += xi[..., n - i - 1]
    return eta


@dataclass(frozen=True)
class RecursionTables:
    """Bundle of the deterministic tables for one (model, n, theta)."""

    model: CoalescentModel
    n: int
    theta: float
    green: np.ndarray | None
    p: np.ndarray
    reachable: np.ndarray
    expected_sfs: np.ndarray
    phi: np.ndarray
    expected_total_length: float
    level_times: LevelTimes | None = None


def build_tables(model, n: int, theta: float = 1.0, **growth_kwargs) -> RecursionTables:
    """Compute the full table bundle (Green, p, expected SFS, phi, total length)."""
    if isinstance(model, LambdaFamily):
        model = lambda_model(model)
    n = _check_n(n)
    if model.is_xi:
        raise UnsupportedModelError(
            "deterministic tables are not defined for four-fold models; simulate instead"
        )
    if model.is_growth and model.growth_rate > 0.0:
        lt = expected_level_times_growth(
            model.growth_rate,
            n,
            growth_kwargs.get("growth_replicates", DEFAULT_GROWTH_REPLICATES),
            growth_kwargs.get("growth_seed"),
        )
        pt = p_table(KINGMAN, n)
        ks = np.arange(2, n + 1, dtype=float)
        eb = pt.p[2:, 1:n].T @ (ks * lt.mean)
        green = None
    else:
        family = KINGMAN if model.is_growth else model.family
        pt = p_table(family, n)
        green = green_function(family, n)
        eb = _lambda_branch_lengths(family, n)
        lt = None
    xi = 0.5 * theta * eb
    return RecursionTables(
        model=model,
        n=n,
        theta=float(theta),
        green=green,
        p=pt.p,
        reachable=pt.reachable,
        expected_sfs=xi,
        phi=eb / eb.sum(),
        expected_total_length=float(eb.sum()),
        level_times=lt,
    )

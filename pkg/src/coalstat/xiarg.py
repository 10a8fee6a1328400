"""Multi-locus ancestry under the four-fold simultaneous-merger model.

This module owns everything that needs more state than a single genealogy:
ancestral configurations over L loci, the Gillespie simulation of their
merger/recombination dynamics, the block-counting chain of the four-fold
model, two-dimensional spectrum summaries, and the kernel-density approximate
likelihood built from them.

Two simulation representations coexist deliberately. The linked path drives
an explicit :class:`AncestralConfig` through the public transition operations
(pairmerge / groupmerge / recomb) and is meant for finite recombination rates
and for invariant checking; it favours clarity. The unlinked path (the
default, and the regime the summaries target) drops chromosome identity:
every locus keeps its own block set, one shared event clock drives all loci,
and nothing is stored per block beyond its leaf count and locus. That path is
array-based and fast enough for hundreds of loci.

Merger events with positive reproduction fraction x cannot be enumerated
(there are too many group patterns, and the driving measure may have infinite
pair intensity near 0), so they are sampled exactly by a size-biased witness
scheme: propose at rate D * mass((0,1]) where D counts mergeable pairs, draw
x from the normalised measure, seed one uniformly chosen pair with one of the
four colours, colour every other block independently (x/4 per colour), and
accept with probability 1/W, where W is the number of (class) pairs that
could have served as the seed. A proposed colouring with W witnesses is
generated with probability proportional to W, so accepting at 1/W restores
the unbiased colouring law at total effective rate matching the generator;
rejected proposals advance time but change nothing. The Kingman atom keeps
its own per-pair clock.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import (
    ArgumentError,
    DegenerateDataError,
    InvariantError,
    UnsupportedModelError,
)
from .measures import (
    _FALLING_FOUR,
    CoalescentModel,
    LambdaFamily,
    log_binom,
    log_moment_integral,
)
from .recursions import _green_from_rows
from .simulator import (
    STREAM_MULTILOCUS,
    FamilySizeLengths,
    SfsVector,
    _growth_lengths,
    default_workers,
    drop_mutations_poisson,
    fresh_seed,
    replicate_rng,
)

_LOG4 = math.log(4.0)
_EMPTY: frozenset = frozenset()

#: Per-replicate target segregating-site counts cycled through when fitting
#: summary densities; theta is set per model so the expected count hits these.
DEFAULT_S_TARGETS = (10, 20, 30, 40, 50)

#: Below this log-density at every grid model, a likelihood-ratio evaluation
#: is flagged as lying outside the fitted densities' effective support.
LOW_DENSITY_LOG = math.log(1e-12)

_ML_CHUNK = 16  # replicates per task; ARG replicates are individually heavy


# ---------------------------------------------------------------------------
# Ancestral configurations and their transitions


@dataclass(frozen=True)
class AncestralConfig:
    """Chromosomes carrying ancestral material for n samples at L loci.

    ``chromosomes[i][l]`` is the (possibly empty) frozenset of leaf indices
    (0-based) whose locus-l material chromosome i carries. At every locus the
    nonempty entries partition range(n); no chromosome is empty at all loci.
    """

    n: int
    L: int
    chromosomes: tuple[tuple[frozenset, ...], ...]

    @property
    def block_count(self) -> int:
        return len(self.chromosomes)

    def locus_blocks(self, l: int) -> tuple[frozenset, ...]:
        """The nonempty ancestral sets at locus l, in chromosome order."""
        return tuple(ch[l] for ch in self.chromosomes if ch[l])


def initial_config(n: int, L: int) -> AncestralConfig:
    """One chromosome per sample, ancestral to that sample at every locus."""
    n, L = int(n), int(L)
    if n < 2:
        raise ArgumentError(f"sample size must be >= 2, got {n}")
    if L < 1:
        raise ArgumentError(f"locus count must be >= 1, got {L}")
    chroms = tuple(tuple(frozenset((i,)) for _ in range(L)) for i in range(n))
    return AncestralConfig(n=n, L=L, chromosomes=chroms)


def validate_config(config: AncestralConfig) -> None:
    """Raise InvariantError unless every locus partitions the full leaf set."""
    full = frozenset(range(config.n))
    for ch in config.chromosomes:
        if not any(ch):
            raise InvariantError("all-empty chromosome present")
        if len(ch) != config.L:
            raise InvariantError("chromosome has wrong locus count")
    for l in range(config.L):
        blocks = [ch[l] for ch in config.chromosomes if ch[l]]
        if sum(len(b) for b in blocks) != config.n or frozenset().union(*blocks) != full:
            raise InvariantError(f"locus {l} does not partition the leaf set")


def _check_index(config: AncestralConfig, i: int) -> int:
    i = int(i)
    if not 0 <= i < config.block_count:
        raise ArgumentError(f"chromosome index {i} out of range")
    return i


def _union_chromosomes(members: tuple[tuple[frozenset, ...], ...], L: int):
    merged = []
    for l in range(L):
        sets = [ch[l] for ch in members if ch[l]]
        union = frozenset().union(*sets) if sets else _EMPTY
        if sum(len(s) for s in sets) != len(union):
            raise InvariantError(f"overlapping ancestral sets at locus {l}")
        merged.append(union)
    return tuple(merged)


def pairmerge(config: AncestralConfig, i1: int, i2: int) -> AncestralConfig:
    """Merge chromosomes i1 and i2 locus-wise into one."""
    i1, i2 = _check_index(config, i1), _check_index(config, i2)
    if i1 == i2:
        raise ArgumentError("pairmerge needs two distinct chromosomes")
    merged = _union_chromosomes((config.chromosomes[i1], config.chromosomes[i2]), config.L)
    rest = tuple(ch for j, ch in enumerate(config.chromosomes) if j not in (i1, i2))
    return AncestralConfig(n=config.n, L=config.L, chromosomes=rest + (merged,))


def groupmerge(config: AncestralConfig, groups) -> AncestralConfig:
    """Merge up to four disjoint chromosome groups simultaneously.

    Not expressible as a single pairmerge by precondition: some group has at
    least three members, or at least two groups have at least two.
    """
    groups = [tuple(_check_index(config, i) for i in g) for g in groups]
    groups = [g for g in groups if g]
    if not 1 <= len(groups) <= 4:
        raise ArgumentError(f"need 1 to 4 nonempty groups, got {len(groups)}")
    flat = [i for g in groups for i in g]
    if len(set(flat)) != len(flat):
        raise ArgumentError("merger groups must be disjoint")
    big = sum(len(g) >= 2 for g in groups)
    if not (any(len(g) >= 3 for g in groups) or big >= 2):
        raise ArgumentError(
            "groupmerge needs a group of >= 3 or two groups of >= 2; use pairmerge"
        )
    merged = tuple(
        _union_chromosomes(tuple(config.chromosomes[i] for i in g), config.L)
        for g in groups
    )
    taken = set(flat)
    rest = tuple(ch for j, ch in enumerate(config.chromosomes) if j not in taken)
    return AncestralConfig(n=config.n, L=config.L, chromosomes=rest + merged)


def recomb(config: AncestralConfig, i: int, breakpoint: int) -> AncestralConfig:
    """Split chromosome i between locus `breakpoint` and `breakpoint`+1 (1-based).

    If either side would carry nothing, the event is a no-op and the original
    configuration object is returned unchanged.
    """
    i = _check_index(config, i)
    l = int(breakpoint)
    if not 1 <= l <= config.L - 1:
        raise ArgumentError(f"breakpoint must lie in 1..{config.L - 1}, got {l}")
    ch = config.chromosomes[i]
    left = ch[:l] + (_EMPTY,) * (config.L - l)
    right = (_EMPTY,) * l + ch[l:]
    if not any(left) or not any(right):
        return config
    rest = tuple(c for j, c in enumerate(config.chromosomes) if j != i)
    return AncestralConfig(n=config.n, L=config.L, chromosomes=rest + (left, right))


# ---------------------------------------------------------------------------
# Block-counting chain of the four-fold model


@lru_cache(maxsize=None)
def _log_partitions_no_singletons(nmax: int) -> np.ndarray:
    """log counts of partitions of m items into exactly r blocks, all >= 2.

    Table shape (nmax+1, 5). Recurrence on the last item: it joins one of the
    r blocks, or pairs up with one of the other m-1 items to found a block.
    """
    A = np.full((nmax + 1, 5), -np.inf)
    A[0, 0] = 0.0
    for m in range(2, nmax + 1):
        for r in range(1, 5):
            A[m, r] = np.logaddexp(math.log(r) + A[m - 1, r], math.log(m - 1) + A[m - 2, r - 1])
    return A


def xi_block_counting_rates(family: LambdaFamily, b: int) -> np.ndarray:
    """Rates of the block count jumping from b to j, returned at [j-1], j = 1..b-1.

    Aggregates xi_fourfold_rate over all patterns with the same group count r
    and merged-block total K (the rate depends on a pattern only through
    those), using the partition counts above as multiplicities.
    """
    b = int(b)
    if b < 2:
        raise ArgumentError(f"need at least 2 blocks, got {b}")
    logA = _log_partitions_no_singletons(b)
    atom = family.atom_at_zero
    out = np.zeros(b - 1)
    for j in range(1, b):
        total = 0.0
        for r in range(1, min(4, b - j, j) + 1):
            K = b - j + r
            s = b - K
            logM = log_binom(b, K) + logA[K, r]
            if r == 1 and K == 2 and atom > 0.0:
                total += math.exp(logM + math.log(atom))
            for l in range(min(s, 4 - r) + 1):
                lt = (
                    _LOG4
                    + log_binom(s, l)
                    + math.log(_FALLING_FOUR[r + l])
                    - (K + l) * _LOG4
                    + log_moment_integral(family, K + l - 2, s - l)
                )
                if lt > -math.inf:
                    total += math.exp(logM + lt)
        out[j - 1] = total
    return out


def xi_green_function(family: LambdaFamily, n: int) -> np.ndarray:
    """Expected time at each block count for the four-fold chain started at n."""
    n = int(n)
    if n < 2:
        raise ArgumentError(f"sample size must be >= 2, got {n}")
    rows: list = [None] * (n + 1)
    totals = np.zeros(n + 1)
    for i in range(2, n + 1):
        rates = xi_block_counting_rates(family, i)
        tot = rates.sum()
        rows[i] = rates / tot
        totals[i] = tot
    return _green_from_rows(rows, totals, n)


def xi_expected_total_length(family: LambdaFamily, n: int) -> float:
    """E[total branch length] of one locus under the four-fold model."""
    G = xi_green_function(family, n)
    ks = np.arange(2, n + 1, dtype=float)
    return float(ks @ G[n, 2 : n + 1])


# ---------------------------------------------------------------------------
# Gillespie simulation


def _draw_x(family: LambdaFamily, rng) -> float:
    """One reproduction fraction from the measure's positive part, normalised."""
    kind = family.kind
    if kind in ("pointmass", "twoatom"):
        return family.psi
    if kind == "star":
        return 1.0
    if kind == "bs":
        return 1.0 - rng.random()  # uniform on (0, 1]
    if kind == "beta":
        while True:
            x = rng.beta(2.0 - family.alpha, family.alpha)
            if 0.0 < x <= 1.0:
                return x
    raise UnsupportedModelError(f"no positive part to sample for {family.spec_string}")


def _as_family(model) -> LambdaFamily:
    if isinstance(model, LambdaFamily):
        return model
    if isinstance(model, CoalescentModel) and model.is_xi:
        return model.family
    raise UnsupportedModelError(
        "the ARG simulator takes a bare family (read four-fold), a four-fold "
        f"model, or a growth model; got {model!r}"
    )


def _resolve_recomb_rates(recomb_rates, L: int):
    if recomb_rates is None:
        return None
    r = np.asarray(recomb_rates, dtype=float)
    if r.ndim == 0:
        r = np.full(L - 1, float(r))
    if r.shape != (L - 1,):
        raise ArgumentError(f"need {L - 1} recombination rates, got shape {r.shape}")
    if not np.all(np.isfinite(r)) or np.any(r < 0.0):
        raise ArgumentError("recombination rates must be finite and >= 0")
    return r


def simulate_arg(
    model,
    n: int,
    L: int,
    rng=None,
    *,
    recomb_rates=None,
    validate: bool = False,
    trace=None,
) -> list[FamilySizeLengths]:
    """Simulate one multi-locus ancestry; returns family-size lengths per locus.

    ``model`` is a LambdaFamily (interpreted four-fold), a four-fold
    CoalescentModel, or a growth model (which yields L independent
    growth-driven genealogies as the no-shared-events baseline).
    ``recomb_rates=None`` selects unlinked mode: per-locus block sets coupled
    only through shared merger events. A vector (or scalar) of L-1 rates
    selects the linked chromosome representation instead.

    ``validate`` re-checks state invariants after every event (slow; for
    tests). ``trace(t, kind, info)`` is called after every state-changing
    event with the absolute event time; a truthy return stops the simulation
    early and the lengths accumulated so far are returned. Growth models
    ignore both hooks.
    """
    n, L = int(n), int(L)
    if n < 2:
        raise ArgumentError(f"sample size must be >= 2, got {n}")
    if L < 1:
        raise ArgumentError(f"locus count must be >= 1, got {L}")
    rng = np.random.default_rng(rng)
    if isinstance(model, CoalescentModel) and model.is_growth:
        if recomb_rates is not None:
            raise ArgumentError("growth baseline is locus-independent; no recombination rates")
        return [
            FamilySizeLengths(n=n, b=_growth_lengths(model.growth_rate, n, rng))
            for _ in range(L)
        ]
    family = _as_family(model)
    rates = _resolve_recomb_rates(recomb_rates, L)
    if rates is None:
        return _simulate_unlinked(family, n, L, rng, validate, trace)
    return _simulate_linked(family, n, L, rates, rng, validate, trace)


def _check_unlinked_state(sizes, locus, counts, n, L):
    per_locus = np.bincount(locus, weights=sizes, minlength=L)
    if not np.all((per_locus == n) | (per_locus == 0)):
        raise InvariantError("a locus neither partitions the leaf set nor is finished")
    if np.any(sizes < 1) or np.any(sizes >= n):
        raise InvariantError("block size out of range")
    ref = np.zeros_like(counts)
    np.add.at(ref, (locus, sizes - 1), 1.0)
    if not np.array_equal(ref, counts):
        raise InvariantError("size-class counts out of sync")


def _simulate_unlinked(family, n, L, rng, validate, trace):
    atom = family.atom_at_zero
    pos_mass = 1.0 - atom  # the measure is a probability measure
    sizes = np.ones(n * L, dtype=np.int64)
    locus = np.repeat(np.arange(L), n)
    counts = np.zeros((L, n - 1))
    counts[:, 0] = float(n)
    lengths = np.zeros((L, n - 1))
    t = 0.0
    while True:
        bl = np.bincount(locus, minlength=L)
        pairs = 0.5 * bl * (bl - 1.0)
        pair_tot = float(pairs.sum())
        if pair_tot == 0.0:
            break
        # Atom pairmerges at atom*pair, proposals at pos_mass*pair; the two
        # masses sum to one, so the joint clock runs at exactly pair_tot.
        # Every event, rejected proposals included, consumes holding time.
        dt = rng.standard_exponential() / pair_tot
        t += dt
        lengths += dt * counts
        cum_pairs = np.cumsum(pairs)
        if rng.random() < atom:
            l0 = int(np.searchsorted(cum_pairs, rng.random() * pair_tot, side="right"))
            ids = np.flatnonzero(locus == l0)
            g = ids[rng.choice(ids.size, size=2, replace=False)]
            merges = _apply_merges(sizes, locus, counts, [g], n)
            sizes, locus = merges[0], merges[1]
            if validate:
                _check_unlinked_state(sizes, locus, counts, n, L)
            if trace is not None and trace(t, "pairmerge", {"merges": merges[2]}):
                break
            continue
        x = _draw_x(family, rng)
        l0 = int(np.searchsorted(cum_pairs, rng.random() * pair_tot, side="right"))
        ids = np.flatnonzero(locus == l0)
        seed_pair = ids[rng.choice(ids.size, size=2, replace=False)]
        c0 = int(rng.integers(4))
        u = rng.random(sizes.size)
        col = np.where(u < x, np.minimum((u * (4.0 / x)).astype(np.int64), 3), -1)
        col[seed_pair] = c0
        coloured = np.flatnonzero(col >= 0)
        keys = locus[coloured] * 4 + col[coloured]
        class_sizes = np.bincount(keys, minlength=4 * L)
        witnesses = int((class_sizes * (class_sizes - 1) // 2).sum())
        if rng.random() * witnesses >= 1.0:
            continue  # thinning rejection; time already advanced
        order = np.argsort(keys, kind="stable")
        sk = keys[order]
        cuts = np.flatnonzero(np.diff(sk)) + 1
        groups = [coloured[run] for run in np.split(order, cuts) if run.size >= 2]
        sizes, locus, info = _apply_merges(sizes, locus, counts, groups, n)
        if validate:
            _check_unlinked_state(sizes, locus, counts, n, L)
        if trace is not None and trace(t, "groupmerge", {"merges": info}):
            break
    return [FamilySizeLengths(n=n, b=lengths[l].copy()) for l in range(L)]


def _apply_merges(sizes, locus, counts, groups, n):
    """Merge each index group in place of the old blocks; roots are dropped.

    Returns the rebuilt (sizes, locus) arrays plus trace info: a tuple of
    (locus, sorted block-count tuple) per locus touched.
    """
    rm = np.zeros(sizes.size, dtype=bool)
    new_sizes: list[int] = []
    new_locus: list[int] = []
    touched: dict[int, list[int]] = {}
    for g in groups:
        l = int(locus[g[0]])
        ssum = int(sizes[g].sum())
        rm[g] = True
        np.subtract.at(counts, (np.full(g.size, l), sizes[g] - 1), 1.0)
        if ssum < n:
            counts[l, ssum - 1] += 1.0
            new_sizes.append(ssum)
            new_locus.append(l)
        touched.setdefault(l, []).append(g.size)
    keep = ~rm
    sizes = np.concatenate([sizes[keep], np.asarray(new_sizes, dtype=np.int64)])
    locus = np.concatenate([locus[keep], np.asarray(new_locus, dtype=np.int64)])
    info = tuple((l, tuple(sorted(ms, reverse=True))) for l, ms in sorted(touched.items()))
    return sizes, locus, info


def _linked_counts(config: AncestralConfig) -> np.ndarray:
    counts = np.zeros((config.L, config.n - 1))
    for ch in config.chromosomes:
        for l, s in enumerate(ch):
            m = len(s)
            if 0 < m < config.n:
                counts[l, m - 1] += 1.0
    return counts


def _simulate_linked(family, n, L, rrates, rng, validate, trace):
    atom = family.atom_at_zero
    pos_mass = 1.0 - atom
    config = initial_config(n, L)
    lengths = np.zeros((L, n - 1))
    t = 0.0
    while True:
        counts = _linked_counts(config)
        if counts.sum() == 0.0:  # every locus has reached its common ancestor
            break
        b = config.block_count
        pair = 0.5 * b * (b - 1)
        eligible = [
            [
                i
                for i, ch in enumerate(config.chromosomes)
                if any(ch[:l]) and any(ch[l:])
            ]
            for l in range(1, L)
        ]
        rec_rates = np.array([rrates[l] * len(eligible[l]) for l in range(L - 1)])
        rec_tot = float(rec_rates.sum())
        total = pair + rec_tot  # atom and proposal clocks together run at `pair`
        dt = rng.standard_exponential() / total
        t += dt
        lengths += dt * counts
        u_event = rng.random() * total
        if u_event < rec_tot:
            l = int(np.searchsorted(np.cumsum(rec_rates), u_event, side="right"))
            who = eligible[l][int(rng.integers(len(eligible[l])))]
            config = recomb(config, who, l + 1)
            if validate:
                validate_config(config)
            if trace is not None and trace(t, "recomb", {"chromosome": who, "breakpoint": l + 1}):
                break
            continue
        if rng.random() < atom:
            i1 = int(rng.integers(b))
            i2 = int(rng.integers(b - 1))
            if i2 >= i1:
                i2 += 1
            config = pairmerge(config, i1, i2)
            if validate:
                validate_config(config)
            if trace is not None and trace(t, "pairmerge", {"merges": ((None, (2,)),)}):
                break
            continue
        x = _draw_x(family, rng)
        i1 = int(rng.integers(b))
        i2 = int(rng.integers(b - 1))
        if i2 >= i1:
            i2 += 1
        c0 = int(rng.integers(4))
        u = rng.random(b)
        col = np.where(u < x, np.minimum((u * (4.0 / x)).astype(np.int64), 3), -1)
        col[i1] = col[i2] = c0
        class_sizes = np.bincount(col[col >= 0], minlength=4)
        witnesses = int((class_sizes * (class_sizes - 1) // 2).sum())
        if rng.random() * witnesses >= 1.0:
            continue
        merge_groups = [np.flatnonzero(col == c) for c in range(4) if class_sizes[c] >= 2]
        if len(merge_groups) == 1 and merge_groups[0].size == 2:
            g = merge_groups[0]
            config = pairmerge(config, int(g[0]), int(g[1]))
        else:
            config = groupmerge(config, [tuple(int(i) for i in g) for g in merge_groups])
        if validate:
            validate_config(config)
        info = ((None, tuple(sorted((g.size for g in merge_groups), reverse=True))),)
        if trace is not None and trace(t, "groupmerge", {"merges": info}):
            break
    return [FamilySizeLengths(n=n, b=lengths[l].copy()) for l in range(L)]


# ---------------------------------------------------------------------------
# Summaries


@dataclass(frozen=True)
class MultiLocusSummary:
    """Averaged two-dimensional spectrum summary over informative loci.

    zeta1 is the mean proportion of singleton mutations; zetabar_k the mean
    proportion in frequency classes cutoff and above. Loci without mutations
    carry no proportions and are excluded; loci_used counts the rest.
    """

    zeta1: float
    zetabar_k: float
    cutoff: int
    loci_used: int

    @property
    def point(self) -> np.ndarray:
        return np.array([self.zeta1, self.zetabar_k])


def summarize(sfs_list, cutoff: int) -> MultiLocusSummary:
    """Average per-locus (singleton share, share at classes >= cutoff)."""
    rows = [s.counts if isinstance(s, SfsVector) else np.asarray(s) for s in sfs_list]
    try:
        arr = np.asarray(rows, dtype=float)
    except ValueError:
        raise ArgumentError("need a list of equal-length spectrum vectors") from None
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise ArgumentError("need a list of equal-length spectrum vectors")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ArgumentError("spectra must be finite and nonnegative")
    n = arr.shape[1] + 1
    cutoff = int(cutoff)
    if not 2 <= cutoff <= n - 1:
        raise ArgumentError(f"cutoff must lie in 2..{n - 1}, got {cutoff}")
    tot = arr.sum(axis=1)
    used = tot > 0
    if not used.any():
        raise DegenerateDataError("no locus carries any mutation")
    z1 = arr[used, 0] / tot[used]
    zk = arr[used, cutoff - 1 :].sum(axis=1) / tot[used]
    return MultiLocusSummary(
        zeta1=float(z1.mean()),
        zetabar_k=float(zk.mean()),
        cutoff=cutoff,
        loci_used=int(used.sum()),
    )


# ---------------------------------------------------------------------------
# Kernel density estimation (Gaussian, full-matrix bandwidth)


@dataclass(eq=False)
class KdeModel:
    """A Gaussian mixture centred on sample points with one shared bandwidth."""

    points: np.ndarray  # (M, d)
    bandwidth: np.ndarray  # (d, d), symmetric positive definite
    kernel: str = "gaussian"
    fallback: bool = False
    _chol: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.bandwidth = np.asarray(self.bandwidth, dtype=float)
        self._chol = np.linalg.cholesky(self.bandwidth)

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "bandwidth": self.bandwidth.tolist(),
            "kernel": self.kernel,
            "fallback": self.fallback,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KdeModel":
        return cls(
            points=np.asarray(d["points"], dtype=float),
            bandwidth=np.asarray(d["bandwidth"], dtype=float),
            kernel=str(d.get("kernel", "gaussian")),
            fallback=bool(d.get("fallback", False)),
        )


def kde_fit(points, bandwidth=None) -> KdeModel:
    """Fit a Gaussian KDE; default bandwidth is Silverman's covariance rule.

    ``bandwidth`` overrides the rule: a scalar h gives h^2 I, a length-d
    vector gives diag(h^2), a d x d matrix is used as is. A degenerate sample
    covariance (fewer than two points, or not positive definite) falls back
    to a diagonal bandwidth and is flagged on the returned model.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ArgumentError("need at least one point")
    if not np.all(np.isfinite(pts)):
        raise ArgumentError("points must be finite")
    M, d = pts.shape
    if bandwidth is not None:
        bw = np.asarray(bandwidth, dtype=float)
        if bw.ndim == 0:
            H = np.eye(d) * float(bw) ** 2
        elif bw.ndim == 1:
            if bw.shape != (d,):
                raise ArgumentError(f"need {d} bandwidths, got {bw.shape}")
            H = np.diag(bw**2)
        elif bw.shape == (d, d):
            H = bw
        else:
            raise ArgumentError(f"bandwidth shape {bw.shape} does not fit dimension {d}")
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise ArgumentError("bandwidth matrix must be positive definite") from None
        return KdeModel(points=pts, bandwidth=H, fallback=False)
    factor = (M * (d + 2) / 4.0) ** (-2.0 / (d + 4))
    fallback = False
    if M >= 2:
        H = factor * np.cov(pts, rowvar=False).reshape(d, d)
        try:
            if not np.all(np.isfinite(H)):
                raise np.linalg.LinAlgError
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            fallback = True
    else:
        fallback = True
    if fallback:
        var = pts.var(axis=0, ddof=0) if M >= 2 else np.zeros(d)
        H = factor * np.diag(np.maximum(var, 1e-8))
    return KdeModel(points=pts, bandwidth=H, fallback=fallback)


def kde_logpdf(model: KdeModel, x):
    """Log density of the mixture at x, a point (d,) or batch (m, d)."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    M, d = model.points.shape
    if X.shape[1] != d:
        raise ArgumentError(f"points live in dimension {d}, got {X.shape[1]}")
    chol = model._chol
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    base = -0.5 * (d * math.log(2.0 * math.pi) + logdet) - math.log(M)
    out = np.empty(X.shape[0])
    step = 256  # bound the (M x step x d) workspace
    for a in range(0, X.shape[0], step):
        chunk = X[a : a + step]
        diffs = chunk[None, :, :] - model.points[:, None, :]
        z = solve_triangular(chol, diffs.reshape(-1, d).T, lower=True)
        q = (z**2).sum(axis=0).reshape(M, chunk.shape[0])
        out[a : a + step] = logsumexp(-0.5 * q, axis=0) + base
    return float(out[0]) if single else out


def kde_eval(model: KdeModel, x):
    """Mixture density at x (exponentiated log density)."""
    return np.exp(kde_logpdf(model, x))


# ---------------------------------------------------------------------------
# Simulation-based multi-locus likelihood


def simulate_multilocus_point(model, n, L, cutoff, theta, rng):
    """One dataset's summary point, or None when no locus carries a mutation."""
    per_locus = simulate_arg(model, n, L, rng)
    sfs = [drop_mutations_poisson(fl, theta, rng) for fl in per_locus]
    try:
        return summarize(sfs, cutoff).point
    except DegenerateDataError:
        return None


def _theta_cycle(model, n, s_targets) -> tuple:
    from .inference import watterson

    return tuple(watterson(model, n, int(s)) for s in s_targets)


def _summary_chunk(task):
    model, n, L, cutoff, thetas, seed, stream, start, stop = task
    out = np.full((stop - start, 2), np.nan)
    for m in range(start, stop):
        rng = replicate_rng(seed, stream, m)
        pt = simulate_multilocus_point(model, n, L, cutoff, thetas[m % len(thetas)], rng)
        if pt is not None:
            out[m - start] = pt
    return out


def simulate_summary_points(
    model,
    n: int,
    L: int,
    cutoff: int,
    M: int,
    seed: int,
    *,
    s_targets=DEFAULT_S_TARGETS,
    workers: int | None = None,
    stream_salt: int = 0,
) -> np.ndarray:
    """M summary points under one model; degenerate replicates come back NaN.

    Replicate m draws from the stream (multilocus tag, model spec checksum,
    stream_salt, m), so results are reproducible for any worker count and
    distinct salts give independent batches.
    """
    M = int(M)
    if M < 1:
        raise ArgumentError(f"need at least one replicate, got {M}")
    if not s_targets:
        raise ArgumentError("need at least one target segregating-site count")
    spec_tag = zlib.crc32(_spec_of(model).encode())
    stream = (STREAM_MULTILOCUS, spec_tag, int(stream_salt))
    thetas = _theta_cycle(model, n, s_targets)
    workers = default_workers() if workers is None else max(1, int(workers))
    tasks = [
        (model, int(n), int(L), int(cutoff), thetas, int(seed), stream, a, min(a + _ML_CHUNK, M))
        for a in range(0, M, _ML_CHUNK)
    ]
    if workers == 1 or len(tasks) == 1:
        parts = [_summary_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_summary_chunk, tasks))
    return np.vstack(parts)


def _spec_of(model) -> str:
    return model.spec_string


@dataclass(eq=False)
class MultilocusLikelihood:
    """Fitted summary densities for a set of models under one protocol."""

    models: tuple
    n: int
    L: int
    cutoff: int
    M: int
    seed: int
    s_targets: tuple
    kdes: tuple
    points_used: tuple

    @classmethod
    def fit(
        cls,
        models,
        n: int,
        L: int,
        cutoff: int,
        M: int,
        seed: int | None = None,
        *,
        s_targets=DEFAULT_S_TARGETS,
        workers: int | None = None,
        _cache: dict | None = None,
    ) -> "MultilocusLikelihood":
        models = tuple(models)
        if not models:
            raise ArgumentError("need at least one model")
        seed = fresh_seed() if seed is None else int(seed)
        kdes, used = [], []
        for model in models:
            key = _spec_of(model)
            if _cache is not None and key in _cache:
                kde, cnt = _cache[key]
            else:
                pts = simulate_summary_points(
                    model, n, L, cutoff, M, seed, s_targets=s_targets, workers=workers
                )
                good = pts[~np.isnan(pts[:, 0])]
                if good.shape[0] == 0:
                    raise DegenerateDataError(
                        f"every fitting replicate under {key} produced zero mutations"
                    )
                kde, cnt = kde_fit(good), good.shape[0]
                if _cache is not None:
                    _cache[key] = (kde, cnt)
            kdes.append(kde)
            used.append(cnt)
        return cls(
            models=models,
            n=int(n),
            L=int(L),
            cutoff=int(cutoff),
            M=int(M),
            seed=seed,
            s_targets=tuple(s_targets),
            kdes=tuple(kdes),
            points_used=tuple(used),
        )

    def log_density(self, point) -> np.ndarray:
        """Fitted log densities at one summary point, per model."""
        pt = point.point if isinstance(point, MultiLocusSummary) else np.asarray(point, float)
        return np.array([kde_logpdf(kde, pt) for kde in self.kdes])


@dataclass(eq=False)
class MultilocusLrResult:
    """Sup-density log-ratio between two fitted model collections."""

    statistic: float
    argmax_null: object
    argmax_alt: object
    argmax_null_index: int
    argmax_alt_index: int
    log_density_null: float
    log_density_alt: float
    low_density: bool
    null_fit: MultilocusLikelihood = field(repr=False, default=None)
    alt_fit: MultilocusLikelihood = field(repr=False, default=None)


def multilocus_statistic(null_fit, alt_fit, point) -> MultilocusLrResult:
    """Evaluate fitted densities at one point; ties resolve to lower index."""
    dn = null_fit.log_density(point)
    da = alt_fit.log_density(point)
    i_n, i_a = int(np.argmax(dn)), int(np.argmax(da))
    best = max(float(dn[i_n]), float(da[i_a]))
    return MultilocusLrResult(
        statistic=float(dn[i_n] - da[i_a]),
        argmax_null=null_fit.models[i_n],
        argmax_alt=alt_fit.models[i_a],
        argmax_null_index=i_n,
        argmax_alt_index=i_a,
        log_density_null=float(dn[i_n]),
        log_density_alt=float(da[i_a]),
        low_density=best < LOW_DENSITY_LOG,
        null_fit=null_fit,
        alt_fit=alt_fit,
    )


def _fourfold(grid):
    """The grid with plain driving-measure members switched to four-fold."""
    from .inference import HypothesisGrid
    from .measures import xi_model

    models = tuple(
        xi_model(m.family)
        if isinstance(m, CoalescentModel) and m.is_lambda
        else xi_model(m)
        if isinstance(m, LambdaFamily)
        else m
        for m in grid.models
    )
    if models == grid.models:
        return grid
    return HypothesisGrid(label=grid.label, models=models)


def multilocus_lr(
    null,
    alt,
    observed,
    n: int,
    L: int,
    cutoff: int,
    M: int = 1000,
    seed: int | None = None,
    *,
    s_targets=DEFAULT_S_TARGETS,
    workers: int | None = None,
) -> MultilocusLrResult:
    """Fit both grids' summary densities and evaluate them at the observation.

    ``observed`` may be a MultiLocusSummary, a bare 2-vector, or a list of
    per-locus spectra (summarised here with the same cutoff). Grid members
    naming a plain driving measure are read four-fold, matching the ARG
    simulator. Models shared between the grids are fitted once; identical
    grids therefore give a statistic of exactly zero.
    """
    from .inference import _as_grid

    null_grid, alt_grid = _fourfold(_as_grid(null)), _fourfold(_as_grid(alt))
    seed = fresh_seed() if seed is None else int(seed)
    if isinstance(observed, MultiLocusSummary):
        point = observed
    else:
        try:
            arr = np.asarray(observed, dtype=float)
        except (TypeError, ValueError):
            arr = None
        if arr is not None and arr.ndim == 1:
            if arr.shape != (2,):
                raise ArgumentError(f"a summary point has 2 coordinates, got {arr.shape}")
            point = arr
        else:
            point = summarize(observed, cutoff)
    cache: dict = {}
    kwargs = dict(s_targets=s_targets, workers=workers, _cache=cache)
    null_fit = MultilocusLikelihood.fit(null_grid.models, n, L, cutoff, M, seed, **kwargs)
    alt_fit = MultilocusLikelihood.fit(alt_grid.models, n, L, cutoff, M, seed, **kwargs)
    return multilocus_statistic(null_fit, alt_fit, point)

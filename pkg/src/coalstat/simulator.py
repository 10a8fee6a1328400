"""Genealogy and site-frequency simulation.

No tree topology is ever stored. A genealogy is summarised as it is built into
family-size lengths b[i], the total branch length subtending i sample members
(i = 1..n-1); by exchangeability that is sufficient for every spectrum
statistic, and it keeps sample sizes in the hundreds cheap. The block holding
all n members (the root) accrues no length.

Batch determinism contract: replicate j of a batch run with master seed s
draws all of its randomness, genealogy first and mutations second, from
``default_rng(SeedSequence(entropy=s, spawn_key=(stream, j)))``. Results are
therefore bit-identical for any worker count or chunking. Stream tags
namespace the independent uses across the package (see ``STREAM_*``).
Summaries combine fixed-size chunks in index order, so means and standard
errors are reproducible to the last bit as well.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ArgumentError, DegenerateDataError, UnsupportedModelError
from .measures import CoalescentModel, LambdaFamily, lambda_model, merger_weight_row

# Spawn-key stream tags; never reuse across purposes.
STREAM_SFS = 1
STREAM_CALIBRATE = 2
STREAM_POWER = 3
STREAM_ARG = 4
STREAM_MULTILOCUS = 5

_CHUNK = 1024  # fixed batch chunk; independent of worker count by design


def default_workers() -> int:
    """Worker count from COALSTAT_WORKERS, defaulting to 1 (inline)."""
    raw = os.environ.get("COALSTAT_WORKERS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ArgumentError(f"COALSTAT_WORKERS must be an integer, got {raw!r}") from None
    return max(1, value)


def replicate_rng(master_seed: int, stream, index: int) -> np.random.Generator:
    """The documented per-replicate generator; see the module docstring.

    ``stream`` is a tag int or a tuple of tag ints; it is flattened into the
    spawn key ahead of the replicate index.
    """
    tag = (stream,) if isinstance(stream, int) else tuple(int(s) for s in stream)
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(*tag, index))
    return np.random.default_rng(ss)


def fresh_seed() -> int:
    """Draw a master seed from OS entropy (recorded in results for reruns)."""
    return int(np.random.SeedSequence().entropy & ((1 << 63) - 1))


@dataclass(eq=False)
class FamilySizeLengths:
    """Branch lengths indexed by subtended family size: b[i-1] covers size i."""

    n: int
    b: np.ndarray

    @property
    def total(self) -> float:
        return float(self.b.sum())


@dataclass(eq=False)
class SfsVector:
    """An (unfolded) site-frequency spectrum; counts[i-1] sites at frequency i/n."""

    counts: np.ndarray

    @property
    def n(self) -> int:
        return self.counts.shape[0] + 1

    @property
    def segregating_sites(self) -> int:
        return int(self.counts.sum())

    def folded(self) -> np.ndarray:
        from .recursions import fold

        return fold(self.counts)


@lru_cache(maxsize=None)
def _merger_size_dist(family: LambdaFamily, b: int):
    """Cumulative merger-size weights for k = 2..b plus the total rate."""
    w = merger_weight_row(family, b)
    cum = np.cumsum(w)
    return cum, float(cum[-1])


def _lambda_lengths(family: LambdaFamily, n: int, rng: np.random.Generator) -> np.ndarray:
    """One measure-driven genealogy; returns b[size] with valid sizes 1..n-1."""
    sizes = np.ones(n, dtype=np.int64)
    counts = np.zeros(n, dtype=np.float64)
    counts[1] = float(n)
    B = np.zeros(n)
    b = n
    while b >= 2:
        cum, total = _merger_size_dist(family, b)
        dt = rng.standard_exponential() / total
        B += dt * counts
        k = 2 + int(np.searchsorted(cum, rng.random() * total, side="right"))
        if k > b:
            k = b
        # Merge k blocks chosen uniformly without replacement (partial
        # Fisher-Yates over the first b slots; identities never matter).
        us = rng.random(k)
        snew = 0
        for t in range(k):
            j = int(us[t] * (b - t))
            sj = int(sizes[j])
            snew += sj
            counts[sj] -= 1.0
            sizes[j] = sizes[b - 1 - t]
        b -= k
        if b == 0:
            break  # snew == n: the root forms, accrues nothing
        sizes[b] = snew
        counts[snew] += 1.0
        b += 1
    return B[1:]


def _growth_lengths(beta: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """One Kingman-with-growth genealogy (pair mergers, accelerated clocks)."""
    sizes = np.ones(n, dtype=np.int64)
    counts = np.zeros(n, dtype=np.float64)
    counts[1] = float(n)
    B = np.zeros(n)
    u = 1.0  # exp(beta * t); additive updates avoid overflow at large beta
    t = 0.0
    for k in range(n, 1, -1):
        pair_rate = k * (k - 1) / 2.0
        E = rng.standard_exponential()
        if beta == 0.0:
            dt = E / pair_rate
        else:
            u_next = u + beta * E / pair_rate
            t_next = math.log(u_next) / beta
            dt = t_next - t
            u, t = u_next, t_next
        B += dt * counts
        if k == 2:
            break
        i1 = int(rng.random() * k)
        i2 = int(rng.random() * (k - 1))
        if i2 >= i1:
            i2 += 1
        snew = int(sizes[i1]) + int(sizes[i2])
        counts[sizes[i1]] -= 1.0
        counts[sizes[i2]] -= 1.0
        counts[snew] += 1.0
        a, c = (i1, i2) if i1 < i2 else (i2, i1)
        sizes[a] = snew
        sizes[c] = sizes[k - 1]
    return B[1:]


def simulate_lengths(model, n: int, rng: np.random.Generator) -> FamilySizeLengths:
    """Simulate one genealogy and return its family-size lengths."""
    n = int(n)
    if n < 2:
        raise ArgumentError(f"sample size must be >= 2, got {n}")
    if isinstance(model, LambdaFamily):
        model = lambda_model(model)
    if model.is_lambda:
        return FamilySizeLengths(n=n, b=_lambda_lengths(model.family, n, rng))
    if model.is_growth:
        return FamilySizeLengths(n=n, b=_growth_lengths(model.growth_rate, n, rng))
    raise UnsupportedModelError(
        f"simulate_lengths covers plain and growth models; use the ARG simulator for {model}"
    )


def drop_mutations_poisson(lengths: FamilySizeLengths, theta: float, rng) -> SfsVector:
    """Poisson mutations at rate theta/2 per unit branch length, per size class."""
    if not (theta >= 0.0) or not math.isfinite(theta):
        raise ArgumentError(f"theta must be finite and >= 0, got {theta!r}")
    return SfsVector(counts=rng.poisson(0.5 * theta * lengths.b).astype(np.int64))


def drop_mutations_fixed_s(lengths: FamilySizeLengths, s: int, rng) -> SfsVector:
    """Exactly s mutations placed multinomially by relative branch length."""
    s = int(s)
    if s < 0:
        raise ArgumentError(f"segregating-site count must be >= 0, got {s}")
    if s == 0:
        return SfsVector(counts=np.zeros(lengths.n - 1, dtype=np.int64))
    total = lengths.total
    if total <= 0.0:
        raise DegenerateDataError("tree has zero total length; cannot place mutations")
    return SfsVector(counts=rng.multinomial(s, lengths.b / total).astype(np.int64))


def _growth_lengths_chunk(beta: float, n: int, rngs: list) -> np.ndarray:
    """Vectorised growth genealogies for a chunk; one row of lengths per rng.

    Each replicate's draws are grouped (all waiting-time exponentials, then
    all pair choices), the documented batch order. It deliberately differs
    from the scalar path's interleaved consumption; the two are distinct
    streams with identical law.
    """
    R = len(rngs)
    E = np.empty((R, n - 1))
    U = np.empty((R, 2 * (n - 2)))
    for r, rng in enumerate(rngs):
        E[r] = rng.standard_exponential(n - 1)
        U[r] = rng.random(2 * (n - 2))
    levels = np.arange(n, 1, -1, dtype=float)
    pair_rates = levels * (levels - 1.0) / 2.0
    if beta == 0.0:
        T = E / pair_rates
    else:
        u = 1.0 + beta * np.cumsum(E / pair_rates, axis=1)
        T = np.diff(np.log(u), axis=1, prepend=0.0) / beta

    B = np.zeros((R, n))
    counts = np.zeros((R, n))
    counts[:, 1] = float(n)
    sizes = np.ones((R, n), dtype=np.int64)
    rows = np.arange(R)
    for j, k in enumerate(range(n, 1, -1)):
        B += T[:, j : j + 1] * counts
        if k == 2:
            break
        i1 = np.minimum((U[:, 2 * j] * k).astype(np.int64), k - 1)
        i2 = np.minimum((U[:, 2 * j + 1] * (k - 1)).astype(np.int64), k - 2)
        i2 += i2 >= i1
        s1 = sizes[rows, i1]
        s2 = sizes[rows, i2]
        snew = s1 + s2  # < n while k > 2, so always a countable size
        counts[rows, s1] -= 1.0
        counts[rows, s2] -= 1.0
        counts[rows, snew] += 1.0
        lo = np.minimum(i1, i2)
        hi = np.maximum(i1, i2)
        sizes[rows, lo] = snew
        sizes[rows, hi] = sizes[rows, k - 1]
    return B[:, 1:]


def _mutate_rows(lengths_rows: np.ndarray, rngs: list, theta, fixed_s) -> np.ndarray:
    R, width = lengths_rows.shape
    out = np.empty((R, width), dtype=np.int64)
    for r, rng in enumerate(rngs):
        row = lengths_rows[r]
        if theta is not None:
            out[r] = rng.poisson(0.5 * theta * row)
        else:
            total = row.sum()
            if total <= 0.0:
                raise DegenerateDataError("tree has zero total length; cannot place mutations")
            out[r] = rng.multinomial(fixed_s, row / total)
    return out


def _sfs_chunk(task):
    """Worker: simulate replicates [start, stop) and return their counts matrix."""
    model, n, theta, fixed_s, start, stop, seed, stream = task
    rngs = [replicate_rng(seed, stream, j) for j in range(start, stop)]
    if model.is_growth:
        lengths_rows = _growth_lengths_chunk(model.growth_rate, n, rngs)
    else:
        lengths_rows = np.empty((stop - start, n - 1))
        for r, rng in enumerate(rngs):
            lengths_rows[r] = _lambda_lengths(model.family, n, rng)
    return _mutate_rows(lengths_rows, rngs, theta, fixed_s)


def iter_sfs_chunks(
    model,
    n: int,
    *,
    theta: float | None = None,
    fixed_s: int | None = None,
    replicates: int,
    seed: int,
    workers: int | None = None,
    stream: int = STREAM_SFS,
):
    """Yield (start_index, counts_matrix) per fixed-size chunk, in index order.

    The building block under :func:`simulate_sfs_batch`; use directly when
    replicate-level output should be streamed rather than held in memory.
    """
    n = int(n)
    if n < 2:
        raise ArgumentError(f"sample size must be >= 2, got {n}")
    if (theta is None) == (fixed_s is None):
        raise ArgumentError("exactly one of theta / fixed_s must be given")
    if theta is not None and (not math.isfinite(theta) or theta < 0.0):
        raise ArgumentError(f"theta must be finite and >= 0, got {theta!r}")
    if fixed_s is not None and int(fixed_s) < 0:
        raise ArgumentError(f"segregating-site count must be >= 0, got {fixed_s}")
    replicates = int(replicates)
    if replicates < 1:
        raise ArgumentError(f"need at least 1 replicate, got {replicates}")
    if isinstance(model, LambdaFamily):
        model = lambda_model(model)
    if model.is_xi:
        raise UnsupportedModelError(
            f"single-locus batches cover plain and growth models; use the ARG simulator for {model}"
        )
    if workers is None:
        workers = default_workers()
    starts = list(range(0, replicates, _CHUNK))
    tasks = [
        (model, n, theta, None if fixed_s is None else int(fixed_s), s, min(s + _CHUNK, replicates), seed, stream)
        for s in starts
    ]
    if workers <= 1 or len(tasks) == 1:
        for task in tasks:
            yield task[4], _sfs_chunk(task)
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for start, result in zip(starts, ex.map(_sfs_chunk, tasks)):
                yield start, result


@dataclass(eq=False)
class BatchResult:
    """Summary (and optionally all replicates) of a batch SFS simulation."""

    model: CoalescentModel
    n: int
    mode: str  # "poisson" | "fixed-s"
    parameter: float
    replicates: int
    seed: int
    mean: np.ndarray
    se: np.ndarray
    counts: np.ndarray | None = None


def simulate_sfs_batch(
    model,
    n: int,
    *,
    theta: float | None = None,
    fixed_s: int | None = None,
    replicates: int,
    seed: int | None = None,
    workers: int | None = None,
    collect: bool = False,
) -> BatchResult:
    """Simulate many spectra; returns per-class mean and standard error.

    Deterministic given (seed, replicates): worker count and chunking change
    nothing. With ``collect`` the full replicate-by-class count matrix is kept.
    """
    if seed is None:
        seed = fresh_seed()
    if isinstance(model, LambdaFamily):
        model = lambda_model(model)
    sums = np.zeros(int(n) - 1)
    sumsq = np.zeros(int(n) - 1)
    kept = [] if collect else None
    total = 0
    for _start, counts in iter_sfs_chunks(
        model, n, theta=theta, fixed_s=fixed_s, replicates=replicates, seed=seed, workers=workers
    ):
        sums += counts.sum(axis=0)
        sumsq += (counts.astype(np.float64) ** 2).sum(axis=0)
        total += counts.shape[0]
        if collect:
            kept.append(counts)
    mean = sums / total
    if total > 1:
        var = np.maximum(sumsq - total * mean**2, 0.0) / (total - 1)
        se = np.sqrt(var / total)
    else:
        se = np.full(int(n) - 1, np.nan)
    return BatchResult(
        model=model,
        n=int(n),
        mode="poisson" if theta is not None else "fixed-s",
        parameter=float(theta if theta is not None else fixed_s),
        replicates=total,
        seed=seed,
        mean=mean,
        se=se,
        counts=np.concatenate(kept, axis=0) if collect else None,
    )

"""Estimators and the calibrated likelihood-ratio test on frequency spectra.

The test compares two finite model grids through the normalised expected
spectrum phi of each model: conditional on s segregating sites the spectrum is
multinomial(s, phi), so only sum(xi_i * log phi_i) varies across models and
the mutation rate drops out. The statistic is the log ratio of the grid
suprema; its null distribution is estimated by simulating fixed-s data under
every null-grid model, and the critical value is the most conservative
(smallest) of the per-model empirical quantiles, honouring the supremum in
the size constraint. Rejection means evidence against the whole null grid.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, xlogy

from .errors import ArgumentError, DegenerateDataError, SpecError, UnsupportedModelError
from .measures import (
    KINGMAN,
    CoalescentModel,
    LambdaFamily,
    beta_coalescent,
    growth_model,
    lambda_model,
    parse_model,
    point_mass,
    two_atom,
    xi_model,
)
from .recursions import DEFAULT_GROWTH_REPLICATES, expected_total_length, phi
from .simulator import (
    STREAM_CALIBRATE,
    STREAM_POWER,
    SfsVector,
    _CHUNK,
    _sfs_chunk,
    default_workers,
    fresh_seed,
)


def watterson(model, n: int, s: int) -> float:
    """Moment estimator of theta: 2 s / E[total branch length].

    Defined for every model here: plain and growth denominators come from the
    deterministic tables, four-fold ones from the exact block-counting chain.
    """
    s = int(s)
    if s < 0:
        raise ArgumentError(f"segregating-site count must be >= 0, got {s}")
    if s == 0:
        return 0.0
    if isinstance(model, CoalescentModel) and model.is_xi:
        from .xiarg import xi_expected_total_length

        eb = xi_expected_total_length(model.family, n)
    else:
        eb = expected_total_length(model, n)
    return 2.0 * s / eb


def real_time_unit(theta_hat: float, mu_per_year: float) -> float:
    """Years per coalescent time unit given theta and a per-year locus mutation rate.

    One unit carries theta/2 expected mutations per lineage, so it spans
    (theta/2) / mu years.
    """
    if theta_hat <= 0.0 or mu_per_year <= 0.0:
        raise ArgumentError("theta and mutation rate must be positive")
    return 0.5 * theta_hat / mu_per_year


def pair_coalescence_probability(theta_hat: float, mu_per_generation: float) -> float:
    """Per-generation pair coalescence probability implied by theta: 2 mu / theta."""
    if theta_hat <= 0.0 or mu_per_generation <= 0.0:
        raise ArgumentError("theta and mutation rate must be positive")
    return 2.0 * mu_per_generation / theta_hat


def _counts_array(sfs) -> np.ndarray:
    if isinstance(sfs, SfsVector):
        return np.asarray(sfs.counts)
    arr = np.asarray(sfs)
    if arr.ndim != 1 or arr.size < 1:
        raise ArgumentError("spectrum must be a one-dimensional vector of counts")
    if np.any(arr < 0) or not np.all(np.equal(np.mod(arr, 1), 0)):
        raise ArgumentError("spectrum counts must be nonnegative integers")
    return arr.astype(np.int64)


def _phi_for(model, n: int, growth_replicates: int) -> np.ndarray:
    if isinstance(model, CoalescentModel) and model.is_xi:
        raise UnsupportedModelError(
            f"spectrum likelihoods need a deterministic phi; {model} has none "
            "(use the multi-locus density machinery)"
        )
    return phi(model, n, growth_replicates=growth_replicates)


def fixed_s_loglik(
    model, n: int, sfs, s: int | None = None, *, growth_replicates: int = DEFAULT_GROWTH_REPLICATES
) -> float:
    """Multinomial log likelihood of an unfolded spectrum given s segregating sites."""
    xi = _counts_array(sfs)
    if len(xi) != int(n) - 1:
        raise ArgumentError(f"spectrum has {len(xi)} classes; expected n-1 = {int(n) - 1}")
    total = int(xi.sum())
    if s is None:
        s = total
    elif int(s) != total:
        raise ArgumentError(f"spectrum sums to {total}, not the stated s = {s}")
    p = _phi_for(model, n, growth_replicates)
    return float(gammaln(s + 1) - gammaln(xi + 1).sum() + xlogy(xi, p).sum())


def poisson_approx_loglik(
    model, n: int, sfs, s: int, *, growth_replicates: int = DEFAULT_GROWTH_REPLICATES
) -> float:
    """Independent-Poisson approximation: xi_i ~ Poisson(s * phi_i).

    When sum(xi) equals s this differs from the multinomial version by the
    model-free constant log(s!) + s - s log s, so both rank models identically.
    """
    xi = _counts_array(sfs)
    if len(xi) != int(n) - 1:
        raise ArgumentError(f"spectrum has {len(xi)} classes; expected n-1 = {int(n) - 1}")
    s = int(s)
    if s < 0:
        raise ArgumentError(f"segregating-site count must be >= 0, got {s}")
    p = _phi_for(model, n, growth_replicates)
    return float((-s * p + xlogy(xi, s * p) - gammaln(xi + 1)).sum())


@dataclass(frozen=True)
class HypothesisGrid:
    """A finite, ordered collection of models treated as one composite hypothesis."""

    label: str
    models: tuple[CoalescentModel, ...]

    def __post_init__(self) -> None:
        if not self.models:
            raise ArgumentError("hypothesis grid must contain at least one model")


_RANGE_NAMES = ("growth", "beta", "pointmass", "twoatom", "xibeta", "xipointmass")


def _grid_point(name: str, value: float) -> CoalescentModel:
    # The beta family parameter is capped below 2; the conventional grid
    # endpoint alpha = 2 is the binary-merger limit, so map it there.
    if name == "growth":
        return growth_model(value)
    if name == "beta":
        return lambda_model(KINGMAN) if abs(value - 2.0) < 1e-9 else lambda_model(beta_coalescent(value))
    if name == "pointmass":
        return lambda_model(point_mass(value))
    if name == "twoatom":
        return lambda_model(two_atom(value))
    if name == "xibeta":
        return xi_model(KINGMAN) if abs(value - 2.0) < 1e-9 else xi_model(beta_coalescent(value))
    if name == "xipointmass":
        return xi_model(point_mass(value))
    raise SpecError(f"unknown grid family {name!r}")


def parse_grid(spec: str) -> HypothesisGrid:
    """Parse a grid spec: '+'-joined tokens, each a model or NAME:START:STOP:STEP.

    Examples: ``growth:0:10:1+growth:20:1000:10``, ``beta:1:2:0.025``,
    ``kingman``. Range endpoints are inclusive up to floating-point slack.
    """
    models: list[CoalescentModel] = []
    for token in spec.split("+"):
        token = token.strip()
        if not token:
            raise SpecError(f"empty token in grid spec {spec!r}")
        parts = token.split(":")
        if len(parts) == 4 and parts[0] in _RANGE_NAMES:
            try:
                start, stop, step = (float(p) for p in parts[1:])
            except ValueError:
                raise SpecError(f"bad numeric range in grid token {token!r}") from None
            if step <= 0.0 or stop < start:
                raise SpecError(f"grid token {token!r} needs stop >= start and step > 0")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            for i in range(count):
                models.append(_grid_point(parts[0], start + i * step))
        else:
            models.append(parse_model(token))
    return HypothesisGrid(label=spec, models=tuple(models))


def _as_grid(grid) -> HypothesisGrid:
    if isinstance(grid, HypothesisGrid):
        return grid
    if isinstance(grid, str):
        return parse_grid(grid)
    if isinstance(grid, (CoalescentModel, LambdaFamily)):
        model = lambda_model(grid) if isinstance(grid, LambdaFamily) else grid
        return HypothesisGrid(label=model.spec_string, models=(model,))
    return HypothesisGrid(label="grid", models=tuple(grid))


def _log_phi_matrix(models, n: int, growth_replicates: int) -> np.ndarray:
    """Rows of log phi per model; zeros of phi become -inf."""
    out = np.empty((len(models), int(n) - 1))
    for i, model in enumerate(models):
        p = _phi_for(model, n, growth_replicates)
        with np.errstate(divide="ignore"):
            out[i] = np.log(p)
    return out


def _sup_scores(counts: np.ndarray, log_phi: np.ndarray):
    """Best sum(xi log phi) over a grid for each data row, honouring phi zeros."""
    finite = np.where(np.isneginf(log_phi), 0.0, log_phi)
    scores = counts @ finite.T
    impossible = (counts @ np.isneginf(log_phi).T.astype(np.float64)) > 0
    scores = np.where(impossible, -np.inf, scores)
    best = scores.max(axis=1)
    argmax = scores.argmax(axis=1)
    return best, argmax


@dataclass(eq=False)
class LrResult:
    """Observed log likelihood-ratio statistic between two grids."""

    statistic: float
    loglik_null: float
    loglik_alt: float
    argmax_null: CoalescentModel
    argmax_alt: CoalescentModel
    kind: str


def lr_statistic(
    null_grid,
    alt_grid,
    sfs,
    s: int | None = None,
    kind: str = "fixed-s",
    *,
    growth_replicates: int = DEFAULT_GROWTH_REPLICATES,
) -> LrResult:
    """sup-log-likelihood(null) minus sup-log-likelihood(alt) for one spectrum."""
    if kind not in ("fixed-s", "poisson"):
        raise ArgumentError(f"statistic kind must be 'fixed-s' or 'poisson', got {kind!r}")
    null_grid = _as_grid(null_grid)
    alt_grid = _as_grid(alt_grid)
    xi = _counts_array(sfs)
    n = len(xi) + 1
    total = int(xi.sum())
    if s is None:
        s = total
    if kind == "fixed-s" and int(s) != total:
        raise ArgumentError(f"spectrum sums to {total}, not the stated s = {s}")

    def grid_logliks(grid):
        if kind == "fixed-s":
            vals = [fixed_s_loglik(m, n, xi, s, growth_replicates=growth_replicates) for m in grid.models]
        else:
            vals = [poisson_approx_loglik(m, n, xi, s, growth_replicates=growth_replicates) for m in grid.models]
        return np.array(vals)

    ll_null = grid_logliks(null_grid)
    ll_alt = grid_logliks(alt_grid)
    if np.all(np.isneginf(ll_null)) and np.all(np.isneginf(ll_alt)):
        raise DegenerateDataError("every model in both grids assigns this spectrum likelihood zero")
    i_null = int(ll_null.argmax())
    i_alt = int(ll_alt.argmax())
    return LrResult(
        statistic=float(ll_null[i_null] - ll_alt[i_alt]),
        loglik_null=float(ll_null[i_null]),
        loglik_alt=float(ll_alt[i_alt]),
        argmax_null=null_grid.models[i_null],
        argmax_alt=alt_grid.models[i_alt],
        kind=kind,
    )


def _quantile_leq(values: np.ndarray, level: float) -> float:
    """Largest observed value v with empirical P(X <= v) <= level."""
    vals = np.sort(values)
    k = int(math.floor(level * len(vals)))
    if k <= 0:
        return -np.inf
    v = vals[k - 1]
    while np.searchsorted(vals, v, side="right") > k:
        left = np.searchsorted(vals, v, side="left")
        if left == 0:
            return -np.inf
        v = vals[left - 1]
    return float(v)


@dataclass(eq=False)
class TestCalibration:
    """Monte Carlo critical value for the grid-vs-grid test at a given size."""

    null_grid: HypothesisGrid
    alt_grid: HypothesisGrid
    n: int
    s: int
    level: float
    replicates: int
    seed: int
    kind: str
    critical_value: float
    per_model_quantiles: np.ndarray
    _log_phi_null: np.ndarray = field(repr=False, default=None)
    _log_phi_alt: np.ndarray = field(repr=False, default=None)


def _model_tasks(model, n, s, replicates, seed, stream):
    return [
        (model, n, None, s, start, min(start + _CHUNK, replicates), seed, stream)
        for start in range(0, replicates, _CHUNK)
    ]


def _run_tasks(tasks, workers):
    if workers <= 1 or len(tasks) == 1:
        return [_sfs_chunk(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_sfs_chunk, tasks))


def calibrate(
    null_grid,
    alt_grid,
    n: int,
    s: int,
    level: float,
    replicates: int,
    seed: int | None = None,
    kind: str = "fixed-s",
    *,
    workers: int | None = None,
    growth_replicates: int = DEFAULT_GROWTH_REPLICATES,
) -> TestCalibration:
    """Estimate the critical value: min over null models of the level-quantile
    of the statistic under fixed-s data from that model."""
    if kind not in ("fixed-s", "poisson"):
        raise ArgumentError(f"statistic kind must be 'fixed-s' or 'poisson', got {kind!r}")
    if not (0.0 < level < 1.0):
        raise ArgumentError(f"test size must lie in (0, 1), got {level}")
    null_grid = _as_grid(null_grid)
    alt_grid = _as_grid(alt_grid)
    n = int(n)
    s = int(s)
    replicates = int(replicates)
    if replicates < 1:
        raise ArgumentError(f"need at least 1 calibration replicate, got {replicates}")
    if math.floor(level * replicates) < 1:
        raise ArgumentError(
            f"{replicates} replicates cannot resolve a {level:g} quantile; increase replicates"
        )
    if seed is None:
        seed = fresh_seed()
    if workers is None:
        workers = default_workers()

    log_phi_null = _log_phi_matrix(null_grid.models, n, growth_replicates)
    log_phi_alt = _log_phi_matrix(alt_grid.models, n, growth_replicates)

    tasks = []
    spans = []  # (model index, task count)
    for mi, model in enumerate(null_grid.models):
        mtasks = _model_tasks(model, n, s, replicates, seed, (STREAM_CALIBRATE, mi))
        spans.append((mi, len(mtasks)))
        tasks.extend(mtasks)
    results = _run_tasks(tasks, workers)

    quantiles = np.empty(len(null_grid.models))
    pos = 0
    for mi, ntasks in spans:
        counts = np.concatenate(results[pos : pos + ntasks], axis=0).astype(np.float64)
        pos += ntasks
        best_null, _ = _sup_scores(counts, log_phi_null)
        best_alt, _ = _sup_scores(counts, log_phi_alt)
        quantiles[mi] = _quantile_leq(best_null - best_alt, level)
    return TestCalibration(
        null_grid=null_grid,
        alt_grid=alt_grid,
        n=n,
        s=s,
        level=level,
        replicates=replicates,
        seed=seed,
        kind=kind,
        critical_value=float(quantiles.min()),
        per_model_quantiles=quantiles,
        _log_phi_null=log_phi_null,
        _log_phi_alt=log_phi_alt,
    )


@dataclass(eq=False)
class TestDecision:
    statistic: float
    critical_value: float
    reject: bool
    argmax_null: CoalescentModel
    argmax_alt: CoalescentModel


def evaluate_test(calibration: TestCalibration, sfs) -> TestDecision:
    """Apply a calibrated test to one observed spectrum (reject when rho <= rho*)."""
    xi = _counts_array(sfs)
    if len(xi) != calibration.n - 1:
        raise ArgumentError(
            f"spectrum has {len(xi)} classes; calibration expects n-1 = {calibration.n - 1}"
        )
    if calibration.kind == "fixed-s" and int(xi.sum()) != calibration.s:
        raise ArgumentError(
            f"spectrum sums to {int(xi.sum())}; calibration was built for s = {calibration.s}"
        )
    row = xi[None, :].astype(np.float64)
    best_null, i_null = _sup_scores(row, calibration._log_phi_null)
    best_alt, i_alt = _sup_scores(row, calibration._log_phi_alt)
    if np.isneginf(best_null[0]) and np.isneginf(best_alt[0]):
        raise DegenerateDataError("every model in both grids assigns this spectrum likelihood zero")
    stat = float(best_null[0] - best_alt[0])
    return TestDecision(
        statistic=stat,
        critical_value=calibration.critical_value,
        reject=bool(stat <= calibration.critical_value),
        argmax_null=calibration.null_grid.models[int(i_null[0])],
        argmax_alt=calibration.alt_grid.models[int(i_alt[0])],
    )


@dataclass(eq=False)
class PowerEstimate:
    truth: CoalescentModel
    power: float
    se: float
    replicates: int
    rejections: int


def power(
    calibration: TestCalibration,
    truth,
    replicates: int,
    seed: int | None = None,
    *,
    workers: int | None = None,
) -> PowerEstimate:
    """Rejection frequency under a truth model, with binomial standard error."""
    if isinstance(truth, LambdaFamily):
        truth = lambda_model(truth)
    if isinstance(truth, str):
        truth = parse_model(truth)
    replicates = int(replicates)
    if replicates < 1:
        raise ArgumentError(f"need at least 1 power replicate, got {replicates}")
    if seed is None:
        seed = fresh_seed()
    if workers is None:
        workers = default_workers()
    stream = (STREAM_POWER, zlib.crc32(truth.spec_string.encode()))
    tasks = _model_tasks(truth, calibration.n, calibration.s, replicates, seed, stream)
    results = _run_tasks(tasks, workers)
    counts = np.concatenate(results, axis=0).astype(np.float64)
    best_null, _ = _sup_scores(counts, calibration._log_phi_null)
    best_alt, _ = _sup_scores(counts, calibration._log_phi_alt)
    stat = best_null - best_alt
    rejections = int((stat <= calibration.critical_value).sum())
    p = rejections / replicates
    return PowerEstimate(
        truth=truth,
        power=p,
        se=math.sqrt(max(p * (1.0 - p), 0.0) / replicates),
        replicates=replicates,
        rejections=rejections,
    )

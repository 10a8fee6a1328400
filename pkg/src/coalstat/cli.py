"""The ``coalstat`` command.

Each subcommand is a thin shell around one library call: parse and validate,
run, serialise. Results go to stdout (or ``--out``); CSV for tabular data,
JSON for structured results. ``--config FILE.json`` supplies defaults for any
long flag (flags given on the command line win).

Exit codes: 0 success, 2 usage errors, 3 domain/validation/input-format
errors, 4 degenerate data.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import __version__
from ._io import (
    dump_json,
    jsonable,
    load_config,
    open_out,
    read_locus_sfs_csv,
    read_sfs_csv,
    read_summaries_csv,
    write_locus_sfs_rows,
    write_sfs_csv,
)
from .errors import (
    ArgumentError,
    CoalstatError,
    DegenerateDataError,
)
from .inference import (
    calibrate,
    evaluate_test,
    pair_coalescence_probability,
    parse_grid,
    power,
    real_time_unit,
    watterson,
)
from .measures import parse_model
from .recursions import build_tables, expected_sfs
from .simulator import (
    STREAM_ARG,
    drop_mutations_poisson,
    fresh_seed,
    iter_sfs_chunks,
    replicate_rng,
    simulate_sfs_batch,
)
from .xiarg import (
    DEFAULT_S_TARGETS,
    kde_fit,
    kde_logpdf,
    multilocus_lr,
    simulate_arg,
    summarize,
)


class _UsageError(Exception):
    """Raised by handlers for missing/conflicting flags; exits 2."""


def _require(args, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        raise _UsageError("missing required flag(s): " + ", ".join("--" + n for n in missing))


def _parse_model_flag(spec: str, flag: str):
    try:
        return parse_model(spec)
    except CoalstatError as exc:
        raise type(exc)(f"{flag}: {exc}") from None


def _parse_grid_flag(spec: str, flag: str):
    try:
        return parse_grid(spec)
    except CoalstatError as exc:
        raise type(exc)(f"{flag}: {exc}") from None


def _seeded(args) -> int:
    """The run's master seed; fresh (and reported on stderr) when unset."""
    if args.seed is None:
        seed = fresh_seed()
        print(f"seed: {seed}", file=sys.stderr)
        return seed
    return int(args.seed)


# --------------------------------------------------------------------------
# subcommand handlers


def _cmd_expected_sfs(args) -> int:
    _require(args, "model", "n", "theta")
    model = _parse_model_flag(args.model, "--model")
    values = expected_sfs(model, int(args.n), float(args.theta), folded=bool(args.folded))
    header = ["i", "expected_folded_count" if args.folded else "expected_count"]
    with open_out(args.out) as fh:
        write_sfs_csv(fh, [repr(float(v)) for v in values], header)
    return 0


def _cmd_tables(args) -> int:
    _require(args, "model", "n")
    model = _parse_model_flag(args.model, "--model")
    theta = 1.0 if args.theta is None else float(args.theta)
    tables = build_tables(model, int(args.n), theta)
    payload = {
        "model": model.spec_string,
        "n": tables.n,
        "theta": tables.theta,
        "green": jsonable(tables.green),
        "p": jsonable(tables.p),
        "reachable": jsonable(tables.reachable.astype(bool).tolist()),
        "expected_sfs": jsonable(tables.expected_sfs),
        "phi": jsonable(tables.phi),
        "expected_total_length": tables.expected_total_length,
        "level_times": None
        if tables.level_times is None
        else {
            "beta": tables.level_times.beta,
            "mean": jsonable(tables.level_times.mean),
            "se": jsonable(tables.level_times.se),
            "replicates": tables.level_times.replicates,
        },
    }
    dump_json(payload, args.out)
    return 0


def _cmd_simulate(args) -> int:
    _require(args, "model", "n", "reps")
    if (args.theta is None) == (args.fixed_s is None):
        raise _UsageError("pass exactly one of --theta or --fixed-s")
    model = _parse_model_flag(args.model, "--model")
    n = int(args.n)
    seed = _seeded(args)
    kwargs = dict(
        theta=None if args.theta is None else float(args.theta),
        fixed_s=None if args.fixed_s is None else int(args.fixed_s),
        replicates=int(args.reps),
        seed=seed,
        workers=args.workers,
    )
    if args.summary:
        result = simulate_sfs_batch(model, n, **kwargs)
        with open_out(args.out) as fh:
            w = csv.writer(fh)
            w.writerow(["i", "mean", "se"])
            for i in range(n - 1):
                w.writerow([i + 1, repr(float(result.mean[i])), repr(float(result.se[i]))])
        return 0
    with open_out(args.out) as fh:
        w = csv.writer(fh)
        w.writerow(["rep", "i", "count"])
        for start, counts in iter_sfs_chunks(model, n, **kwargs):
            for r in range(counts.shape[0]):
                for i in range(n - 1):
                    w.writerow([start + r, i + 1, int(counts[r, i])])
    return 0


def _cmd_watterson(args) -> int:
    _require(args, "model", "n", "s")
    model = _parse_model_flag(args.model, "--model")
    theta_hat = watterson(model, int(args.n), int(args.s))
    payload = {"model": model.spec_string, "n": int(args.n), "s": int(args.s), "theta_hat": theta_hat}
    if args.mu_year is not None:
        payload["years_per_unit"] = real_time_unit(theta_hat, float(args.mu_year))
    if args.mu_gen is not None:
        payload["pair_coalescence_probability"] = pair_coalescence_probability(
            theta_hat, float(args.mu_gen)
        )
    dump_json(payload, args.out)
    return 0


def _cmd_lr_test(args) -> int:
    _require(args, "null", "alt", "sfs", "s", "level", "reps")
    null_grid = _parse_grid_flag(args.null, "--null")
    alt_grid = _parse_grid_flag(args.alt, "--alt")
    obs, n, folded = read_sfs_csv(args.sfs, n=args.n, folded=bool(args.folded))
    if folded:
        raise ArgumentError("lr-test works on unfolded spectra; refit from unfolded counts")
    seed = _seeded(args)
    cal = calibrate(
        null_grid,
        alt_grid,
        n,
        int(args.s),
        float(args.level),
        int(args.reps),
        seed,
        kind=args.kind,
        workers=args.workers,
    )
    decision = evaluate_test(cal, obs)
    payload = {
        "rho": decision.statistic,
        "rho_star": decision.critical_value,
        "reject": decision.reject,
        "argmax_null": decision.argmax_null.spec_string,
        "argmax_alt": decision.argmax_alt.spec_string,
        "level": cal.level,
        "kind": cal.kind,
        "n": cal.n,
        "s": cal.s,
        "seed": seed,
        "per_model_quantiles": jsonable(cal.per_model_quantiles),
    }
    dump_json(payload, args.out)
    return 0


def _truth_param(model) -> object:
    if model.is_growth:
        return model.growth_rate
    family = model.family
    if family is not None and family.alpha is not None:
        return family.alpha
    if family is not None and family.psi is not None:
        return family.psi
    return model.spec_string


def _cmd_power(args) -> int:
    _require(args, "null", "alt", "truth", "n", "s", "level", "reps")
    null_grid = _parse_grid_flag(args.null, "--null")
    alt_grid = _parse_grid_flag(args.alt, "--alt")
    truth_grid = _parse_grid_flag(args.truth, "--truth")
    seed = _seeded(args)
    cal = calibrate(
        null_grid,
        alt_grid,
        int(args.n),
        int(args.s),
        float(args.level),
        int(args.reps),
        seed,
        kind=args.kind,
        workers=args.workers,
    )
    power_reps = int(args.power_reps) if args.power_reps is not None else int(args.reps)
    with open_out(args.out) as fh:
        w = csv.writer(fh)
        w.writerow(["truth_param", "power", "se"])
        for truth in truth_grid.models:
            est = power(cal, truth, power_reps, seed, workers=args.workers)
            w.writerow([_truth_param(truth), repr(est.power), repr(est.se)])
    return 0


def _cmd_arg_simulate(args) -> int:
    _require(args, "family", "n", "L", "theta", "reps")
    model = _parse_model_flag(args.family, "--family")
    if model.is_lambda:
        model = model.family  # a bare family is read four-fold by the simulator
    if args.recomb is not None and args.unlinked:
        raise _UsageError("--recomb and --unlinked are mutually exclusive")
    recomb_rates = None
    if args.recomb is not None:
        try:
            recomb_rates = [float(tok) for tok in str(args.recomb).split(",") if tok.strip()]
        except ValueError:
            raise ArgumentError(f"--recomb: not a comma-separated rate list: {args.recomb!r}") from None
    n, L = int(args.n), int(args.L)
    theta = float(args.theta)
    seed = _seeded(args)
    with open_out(args.out) as fh:
        w = write_locus_sfs_rows(fh, write_header=True)
        for rep in range(int(args.reps)):
            rng = replicate_rng(seed, STREAM_ARG, rep)
            per_locus = simulate_arg(model, n, L, rng, recomb_rates=recomb_rates)
            for l, lengths in enumerate(per_locus):
                counts = drop_mutations_poisson(lengths, theta, rng).counts
                for i in range(n - 1):
                    w.writerow([rep, l, i + 1, int(counts[i])])
    return 0


def _cmd_multilocus_lr(args) -> int:
    _require(args, "null", "alt", "obs", "k", "M")
    null_grid = _parse_grid_flag(args.null, "--null")
    alt_grid = _parse_grid_flag(args.alt, "--alt")
    spectra, n_file, L_file = read_locus_sfs_csv(args.obs)
    n = int(args.n) if args.n is not None else n_file
    L = int(args.L) if args.L is not None else L_file
    cutoff = int(args.k)
    observed = summarize(spectra, cutoff)
    seed = _seeded(args)
    s_targets = DEFAULT_S_TARGETS
    if args.s_targets is not None:
        s_targets = tuple(int(tok) for tok in str(args.s_targets).split(",") if tok.strip())
    result = multilocus_lr(
        null_grid,
        alt_grid,
        observed,
        n,
        L,
        cutoff,
        int(args.M),
        seed,
        s_targets=s_targets,
        workers=args.workers,
    )
    payload = {
        "statistic": result.statistic,
        "argmax_null": result.argmax_null.spec_string,
        "argmax_alt": result.argmax_alt.spec_string,
        "log_density_null": result.log_density_null,
        "log_density_alt": result.log_density_alt,
        "low_density": result.low_density,
        "observed": {
            "zeta1": observed.zeta1,
            "zetabar_k": observed.zetabar_k,
            "cutoff": observed.cutoff,
            "loci_used": observed.loci_used,
        },
        "n": n,
        "L": L,
        "M": int(args.M),
        "seed": seed,
        "points_used": {
            "null": jsonable(result.null_fit.points_used),
            "alt": jsonable(result.alt_fit.points_used),
        },
    }
    dump_json(payload, args.out)
    return 0


def _cmd_kde(args) -> int:
    _require(args, "in")
    points = read_summaries_csv(getattr(args, "in"))
    bandwidth = None if args.bandwidth is None else float(args.bandwidth)
    model = kde_fit(points, bandwidth=bandwidth)
    dump_json(model.to_dict(), args.out)
    if args.grid_out is not None:
        steps = int(args.grid_steps)
        if steps < 2:
            raise ArgumentError(f"--grid-steps must be >= 2, got {steps}")
        axis = np.linspace(0.0, 1.0, steps)
        with open_out(args.grid_out) as fh:
            w = csv.writer(fh)
            w.writerow(["zeta1", "zetabar_k", "density"])
            for a in axis:
                dens = np.exp(kde_logpdf(model, np.column_stack([np.full(steps, a), axis])))
                for b, d in zip(axis, dens):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(d))])
    return 0


# --------------------------------------------------------------------------
# parser assembly


def _add_common(sp):
    sp.add_argument("--config", help="JSON file supplying defaults for any long flag")
    sp.add_argument("--workers", type=int, help="process count (default: COALSTAT_WORKERS or 1)")
    sp.add_argument("--seed", type=int, help="master seed (fresh and reported when omitted)")
    sp.add_argument("--out", help="output file (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="coalstat",
        description="Coalescent spectra, simulation, and calibrated model tests.",
    )
    p.add_argument("--version", action="version", version=f"coalstat {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    sp = sub.add_parser("expected-sfs", help="exact or table-based expected spectrum")
    sp.add_argument("--model")
    sp.add_argument("--n", type=int)
    sp.add_argument("--theta", type=float)
    sp.add_argument("--folded", action="store_true", default=None)
    _add_common(sp)
    sp.set_defaults(handler=_cmd_expected_sfs)

    sp = sub.add_parser("tables", help="dump the deterministic tables as JSON")
    sp.add_argument("--model")
    sp.add_argument("--n", type=int)
    sp.add_argument("--theta", type=float)
    _add_common(sp)
    sp.set_defaults(handler=_cmd_tables)

    sp = sub.add_parser("simulate", help="simulate spectra (per replicate or summarised)")
    sp.add_argument("--model")
    sp.add_argument("--n", type=int)
    sp.add_argument("--theta", type=float)
    sp.add_argument("--fixed-s", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--summary", action="store_true", default=None)
    _add_common(sp)
    sp.set_defaults(handler=_cmd_simulate)

    sp = sub.add_parser("watterson", help="moment estimate of theta from s")
    sp.add_argument("--model")
    sp.add_argument("--n", type=int)
    sp.add_argument("--s", type=int)
    sp.add_argument("--mu-year", type=float, help="per-year mutation rate for the time embedding")
    sp.add_argument("--mu-gen", type=float, help="per-generation rate for the pair-merge probability")
    _add_common(sp)
    sp.set_defaults(handler=_cmd_watterson)

    sp = sub.add_parser("lr-test", help="calibrated grid-vs-grid likelihood-ratio test")
    sp.add_argument("--null")
    sp.add_argument("--alt")
    sp.add_argument("--sfs", help="observed spectrum CSV (header i,count)")
    sp.add_argument("--n", type=int, help="sample size override when the file leaves it open")
    sp.add_argument("--s", type=int)
    sp.add_argument("--level", type=float)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--kind", choices=("fixed-s", "poisson"), default="fixed-s")
    sp.add_argument("--folded", action="store_true", default=None)
    _add_common(sp)
    sp.set_defaults(handler=_cmd_lr_test)

    sp = sub.add_parser("power", help="power curve of the calibrated test over truth models")
    sp.add_argument("--null")
    sp.add_argument("--alt")
    sp.add_argument("--truth", help="model or grid spec of data-generating models")
    sp.add_argument("--n", type=int)
    sp.add_argument("--s", type=int)
    sp.add_argument("--level", type=float)
    sp.add_argument("--reps", type=int, help="calibration replicates per null model")
    sp.add_argument("--power-reps", type=int, help="power replicates (default: --reps)")
    sp.add_argument("--kind", choices=("fixed-s", "poisson"), default="fixed-s")
    _add_common(sp)
    sp.set_defaults(handler=_cmd_power)

    sp = sub.add_parser("arg-simulate", help="multi-locus ancestry simulation")
    sp.add_argument("--family", help="family or model spec; plain families are read four-fold")
    sp.add_argument("--n", type=int)
    sp.add_argument("--L", type=int)
    sp.add_argument("--recomb", help="comma-separated per-breakpoint rates (linked mode)")
    sp.add_argument("--unlinked", action="store_true", default=None)
    sp.add_argument("--theta", type=float)
    sp.add_argument("--reps", type=int)
    _add_common(sp)
    sp.set_defaults(handler=_cmd_arg_simulate)

    sp = sub.add_parser("multilocus-lr", help="simulation-based multi-locus test statistic")
    sp.add_argument("--null")
    sp.add_argument("--alt")
    sp.add_argument("--obs", help="per-locus spectrum CSV (locus,i,count)")
    sp.add_argument("--k", type=int, help="tail cutoff class")
    sp.add_argument("--M", type=int, help="fitting replicates per model")
    sp.add_argument("--n", type=int)
    sp.add_argument("--L", type=int)
    sp.add_argument("--s-targets", help="comma-separated target segregating-site counts")
    _add_common(sp)
    sp.set_defaults(handler=_cmd_multilocus_lr)

    sp = sub.add_parser("kde", help="fit a summary density and export plot data")
    sp.add_argument("--in", dest="in", help="summary CSV (zeta1,zetabar_k)")
    sp.add_argument("--bandwidth", type=float, help="isotropic bandwidth override")
    sp.add_argument("--grid-out", help="CSV of density over the unit square")
    sp.add_argument("--grid-steps", type=int, default=50)
    _add_common(sp)
    sp.set_defaults(handler=_cmd_kde)

    return p


def _merge_config(args) -> None:
    if getattr(args, "config", None) is None:
        return
    for key, value in load_config(args.config).items():
        attr = str(key).replace("-", "_")
        if not hasattr(args, attr):
            raise ArgumentError(f"--config: unknown setting {key!r}")
        if getattr(args, attr) is None:
            setattr(args, attr, value)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "handler", None) is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        _merge_config(args)
        return args.handler(args)
    except _UsageError as exc:
        print(f"coalstat {args.command}: {exc}", file=sys.stderr)
        return 2
    except DegenerateDataError as exc:
        print(f"coalstat {args.command}: degenerate data: {exc}", file=sys.stderr)
        return 4
    except CoalstatError as exc:
        print(f"coalstat {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())

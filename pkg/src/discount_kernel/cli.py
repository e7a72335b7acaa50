"""Batch command-line front end.

Subcommands: ``ingest``, ``fit``, ``crossval``, ``reduce``, ``simulate`` and
``compare-naive``.  Every run writes a ``manifest.json`` (inputs, parameters,
seed, versions) into its output directory.  Exit codes: 0 success, 2 input
error, 3 strict-mode fit failure, 4 invalid simulation diagnostic.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .curve_fit import (
    FitConfig,
    IllPosedFitError,
    NegativeDiscountError,
    contract_yields,
    cross_validate,
    fit_curve,
    model_prices,
    rmse_yield_report,
    yield_from_price,
)
from .data_io import (
    SCHEMA_VERSION,
    SchemaVersionError,
    dump_json,
    ingest_csv,
    load_artifacts,
    save_artifacts,
    write_rejects_csv,
)
from .dynamics import (
    AffineModelSpec,
    DiagnosticInvalidError,
    DiffusionSpec,
    estimate_covariance,
    martingale_diagnostic,
    simulate,
)
from .kernels import KernelSpec
from .reduce import OptimizerConfig, ReducedModel, naive_fit, sweep_dimensions

log = logging.getLogger("discount_kernel")

EXIT_OK, EXIT_INPUT, EXIT_STRICT, EXIT_DIAGNOSTIC = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class InputError(Exception):
    """Bad user input; mapped to exit code 2."""


def _configure_logging():
    level = LOG_LEVELS.get(os.environ.get("DISCOUNT_KERNEL_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _manifest(args, out: Path, **extra):
    info = {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "seed": args.seed,
        "versions": {"discount_kernel": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    info.update(extra)
    dump_json(info, out / "run_manifest.json")


def _load_bundle(path, key):
    try:
        bundle = load_artifacts(path)
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"cannot read bundle {path}: {exc}") from exc
    except SchemaVersionError as exc:
        raise InputError(str(exc)) from exc
    if key not in bundle:
        raise InputError(f"bundle {path} has no '{key}' entry")
    return bundle


def _map(jobs, fn, items):
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


# -- subcommands ---------------------------------------------------------------


def cmd_ingest(args) -> int:
    path = Path(args.csv)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    try:
        systems, rejects = ingest_csv(path)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = args.out
    if systems:
        save_artifacts(out, {"systems": systems})
    else:
        out.mkdir(parents=True, exist_ok=True)
        log.warning("no valid quotes in %s", path)
    write_rejects_csv(out / "rejects.csv", rejects)
    _manifest(args, out, n_days=len(systems), n_rejects=len(rejects))
    return EXIT_OK


def _fit_all(systems, config, jobs):
    def one(s):
        try:
            return fit_curve(s, config), None
        except (IllPosedFitError, np.linalg.LinAlgError) as exc:
            return None, str(exc)

    return _map(jobs, one, systems)


def cmd_fit(args) -> int:
    bundle = _load_bundle(args.bundle, "systems")
    systems = bundle["systems"]
    try:
        config = FitConfig(KernelSpec(args.alpha, args.beta), args.ridge, args.terminal_weight)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    results = _fit_all(systems, config, args.jobs)
    ok = [(s, c) for s, (c, _) in zip(systems, results) if c is not None]
    failures = [(s.date, err) for s, (c, err) in zip(systems, results) if c is None]
    out = args.out
    save_artifacts(out, {"curves": [c for _, c in ok], "systems": [s for s, _ in ok]},
                   extra={"kernel": config.kernel.to_dict(), "ridge": config.ridge})
    report = rmse_yield_report([s for s, _ in ok], [c for _, c in ok])
    _write_csv(out / "rmse.csv", ("date", "rmse_yield", "n_contracts"), report.rows())
    grid = np.linspace(args.grid_step, args.grid_max, int(round(args.grid_max / args.grid_step)))
    rows = []
    for s, c in ok:
        prices = c(grid)
        for x, p in zip(grid, prices):
            y = yield_from_price(p, x) if p > 0 else math.nan
            rows.append((s.date, float(x), float(p), y))
    _write_csv(out / "curve_grid.csv", ("date", "tenor", "price", "yield"), rows)
    _write_csv(out / "failures.csv", ("date", "reason"), failures)
    _manifest(args, out, kernel=config.kernel.to_dict(), ridge=config.ridge, n_failed=len(failures),
              average_rmse_yield=report.average)
    if failures:
        log.warning("%d day(s) failed to fit; see failures.csv", len(failures))
        if args.strict:
            return EXIT_STRICT
    return EXIT_OK


def _valid_grid(grid):
    """Split a grid file into valid candidate lists and a list of invalid entries."""
    bad = []
    clean = {}
    checks = {"alpha": lambda v: v >= 0, "beta": lambda v: v > 0, "ridge": lambda v: v > 0}
    for key, ok in checks.items():
        vals = grid.get(key)
        if not isinstance(vals, list):
            raise InputError(f"grid entry '{key}' must be a list")
        good = []
        for v in vals:
            if isinstance(v, (int, float)) and math.isfinite(v) and ok(v):
                good.append(float(v))
            else:
                bad.append((key, v))
        clean[key] = good
    return clean, bad


def cmd_crossval(args) -> int:
    if args.folds < 2:
        raise InputError("--folds must be at least 2")
    bundle = _load_bundle(args.bundle, "systems")
    try:
        grid = json.loads(Path(args.grid).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read grid {args.grid}: {exc}") from exc
    clean, bad = _valid_grid(grid)
    for key, v in bad:
        log.warning("invalid grid entry %s=%r skipped", key, v)
    if not all(clean.values()):
        raise InputError("grid has no valid candidates")
    res = cross_validate(bundle["systems"], clean, folds=args.folds, terminal_weight=args.terminal_weight)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    best = dict(zip(("alpha", "beta", "ridge"), res.best))
    dump_json(best, out / "best.json")
    _write_csv(out / "cv_scores.csv", ("alpha", "beta", "ridge", "score"), res.table)
    _write_csv(out / "invalid_grid.csv", ("parameter", "value"), [(k, repr(v)) for k, v in bad])
    _manifest(args, out, best=best)
    return EXIT_OK


def _optimizer_config(args) -> OptimizerConfig:
    return OptimizerConfig(n_starts=args.starts, max_iter=args.max_iter, seed=args.seed, jobs=args.jobs)


def _reduced_rmse(model: ReducedModel, systems):
    return rmse_yield_report(systems, [model.curve(t) for t in range(len(systems))])


def cmd_reduce(args) -> int:
    if args.d_min < 0 or args.d_min > args.d_max:
        raise InputError("need 0 <= d_min <= d_max")
    bundle = _load_bundle(args.curves, "curves")
    curves, systems = bundle["curves"], bundle.get("systems")
    sweep = sweep_dimensions(curves, range(args.d_min, args.d_max + 1), _optimizer_config(args))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for d, (model, report) in sweep.items():
        model.dates = [s.date for s in systems] if systems else None
        avg = _reduced_rmse(model, systems).average if systems else math.nan
        rows.append((d, report.total, avg, report.converged))
        dump_json(model.to_dict(), out / f"model_d{d}.json")
        if not report.converged:
            log.warning("rate search for d=%d did not converge", d)
    _write_csv(out / "sweep.csv", ("d", "total_loss", "avg_rmse", "converged"), rows)
    _manifest(args, out, d_range=[args.d_min, args.d_max])
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        model = ReducedModel.from_dict(json.loads(Path(args.model).read_text()))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read reduced model {args.model}: {exc}") from exc
    if model.daily_coefs.shape[0] < 2:
        raise InputError("reduced model needs at least two days of coefficients")
    sigma = estimate_covariance(model.daily_coefs)
    spec = AffineModelSpec(model.rates, model.daily_coefs[-1])
    try:
        diff = DiffusionSpec(sigma, dt=args.dt, horizon=args.horizon, n_paths=args.n_paths, seed=args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    maturities = sorted({float(m) for m in args.maturities if 0 < m <= args.horizon} | {args.horizon})
    record_every = max(int(round(args.record_dt / args.dt)), 1)
    result = simulate(spec, diff, record_every=record_every, jobs=args.jobs)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    dump_json({"sigma": sigma.tolist(), "model": spec.to_dict(), "diffusion": diff.to_dict()}, out / "calibration.json")
    n_keep = min(args.paths_csv, diff.n_paths)
    d1 = spec.rates.size
    rows = []
    for p in range(n_keep):
        for k, t in enumerate(result.times):
            rows.append((p, float(t), *map(float, result.paths[p, k]), bool(result.exploded[p])))
    _write_csv(out / "paths.csv", ("path_id", "time", *[f"z_{i}" for i in range(d1)], "exploded"), rows)
    try:
        report = martingale_diagnostic(spec, diff, maturities, result=result)
    except DiagnosticInvalidError as exc:
        _write_csv(out / "diagnostic_invalid.csv", ("reason", "n_exploded", "n_paths"),
                   [(str(exc), int(result.exploded.sum()), diff.n_paths)])
        _manifest(args, out, diagnostic="invalid")
        log.error("%s", exc)
        return EXIT_DIAGNOSTIC
    _write_csv(out / "summary.csv", ("maturity", "time", "mean_discounted_bond", "stderr", "stat"), report.rows())
    _manifest(args, out, diagnostic_passed=report.passed, max_abs_stat=report.max_abs_stat,
              n_exploded=int(result.exploded.sum()))
    if not report.passed:
        log.warning("martingale diagnostic exceeded the threshold (max |stat| = %.2f)", report.max_abs_stat)
    return EXIT_OK


def _price_rmse(system, curve) -> float:
    return float(np.sqrt(np.mean((system.prices - model_prices(system, curve)) ** 2)))


def _yield_rmse(system, curve) -> float:
    try:
        obs = contract_yields(system, system.prices)
        mod = contract_yields(system, model_prices(system, curve))
    except (ValueError, NegativeDiscountError):
        return math.nan
    return float(np.sqrt(np.mean((obs - mod) ** 2)))


def run_comparison(systems, config: FitConfig, d: int, opt: OptimizerConfig, init=None, jobs: int = 1):
    """Kernel fit plus reduction at ``d`` versus the naive regression with ``d + 1`` exponentials.

    The naive search starts from ``init`` or, when absent, from the reduced
    model's rates.  Returns a dict with per-day RMSE tables and timings.
    """
    t0 = time.perf_counter()
    fits = [c for c, _ in _fit_all(systems, config, jobs)]
    t_fit = time.perf_counter() - t0
    if any(c is None for c in fits):
        raise IllPosedFitError("kernel fit failed on at least one day")
    t0 = time.perf_counter()
    model, report = sweep_dimensions(fits, [d], opt)[d]
    t_reduce = time.perf_counter() - t0
    start = np.asarray(init, dtype=float) if init is not None else model.rates
    t0 = time.perf_counter()
    naive = naive_fit(systems, d + 1, start, terminal_weight=config.terminal_weight or 1e4)
    t_naive = time.perf_counter() - t0
    rows = []
    for t, s in enumerate(systems):
        rows.append((s.date, _yield_rmse(s, fits[t]), _yield_rmse(s, model.curve(t)), _yield_rmse(s, naive.curve(t)),
                     _price_rmse(s, fits[t]), _price_rmse(s, model.curve(t)), _price_rmse(s, naive.curve(t))))
    timings = {"kernel_fit": t_fit, "kernel_reduce": t_reduce, "kernel_total": t_fit + t_reduce, "naive": t_naive}
    return {"rows": rows, "timings": timings, "model": model, "naive": naive, "fits": fits,
            "converged": {"reduce": report.converged, "naive": naive.converged}}


def cmd_compare_naive(args) -> int:
    bundle = _load_bundle(args.bundle, "systems")
    config = FitConfig(KernelSpec(args.alpha, args.beta), args.ridge, args.terminal_weight)
    init = None
    if args.init:
        init = [float(v) for v in args.init.split(",")]
        if len(init) != args.d + 1:
            raise InputError(f"--init needs {args.d + 1} comma-separated rates")
    res = run_comparison(bundle["systems"], config, args.d, _optimizer_config(args), init, args.jobs)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "comparison.csv",
               ("date", "rmse_kernel", f"rmse_reduced_{args.d}", "rmse_naive",
                "price_rmse_kernel", f"price_rmse_reduced_{args.d}", "price_rmse_naive"), res["rows"])
    _write_csv(out / "timings.csv", ("stage", "seconds"), res["timings"].items())
    if not res["converged"]["naive"]:
        log.warning("naive regression did not converge")
    _manifest(args, out, converged=res["converged"], naive_rates=res["naive"].rates.tolist(),
              reduced_rates=res["model"].rates.tolist())
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------


def _add_common(p):
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker cap for per-day and per-start work")
    p.add_argument("--strict", action="store_true", help="treat per-day fit failures as fatal")


def _add_kernel(p, ridge=1e-3):
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=0.04)
    p.add_argument("--ridge", type=float, default=ridge)
    p.add_argument("--terminal-weight", type=float, default=1e4,
                   help="weight of the synthetic h(0)=1 contract relative to the median weight (inf = hard)")


def _add_optimizer(p):
    p.add_argument("--starts", type=int, default=8)
    p.add_argument("--max-iter", type=int, default=2000)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="discount-kernel", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="quote CSV -> per-day cashflow systems")
    p.add_argument("csv")
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="kernel ridge fit of every day")
    p.add_argument("bundle", help="directory written by 'ingest'")
    _add_kernel(p)
    p.add_argument("--grid-max", type=float, default=30.0, help="longest tenor of curve_grid.csv")
    p.add_argument("--grid-step", type=float, default=0.25)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("crossval", help="k-fold grid search over (alpha, beta, ridge)")
    p.add_argument("bundle")
    p.add_argument("--grid", required=True, help='JSON file {"alpha": [...], "beta": [...], "ridge": [...]}')
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--terminal-weight", type=float, default=1e4)
    _add_common(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("reduce", help="finite-factor reduction sweep over d")
    p.add_argument("curves", help="directory written by 'fit'")
    p.add_argument("--d-min", type=int, default=1)
    p.add_argument("--d-max", type=int, default=3)
    _add_optimizer(p)
    _add_common(p)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("simulate", help="calibrate sigma and simulate the factor dynamics")
    p.add_argument("model", help="model_d<d>.json written by 'reduce'")
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1.0 / 252)
    p.add_argument("--n-paths", type=int, default=1000)
    p.add_argument("--maturities", type=float, nargs="*", default=[])
    p.add_argument("--record-dt", type=float, default=1.0 / 252, help="spacing of recorded states")
    p.add_argument("--paths-csv", type=int, default=20, help="number of paths written to paths.csv")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare-naive", help="kernel pipeline versus direct exponential regression")
    p.add_argument("bundle")
    p.add_argument("--d", type=int, default=2, help="reduced dimension; the naive family has d+1 exponentials")
    p.add_argument("--init", default=None, help="comma-separated naive start rates (default: reduced rates)")
    _add_kernel(p)
    _add_optimizer(p)
    _add_common(p)
    p.set_defaults(func=cmd_compare_naive)
    return ap


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (IllPosedFitError, NegativeDiscountError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STRICT if args.strict else EXIT_INPUT

"""Command-line driver: simulate, fit, forecast, study, diagnose.

Every command is a pure function of its inputs, options and seed. Options can
also come from a JSON file passed with ``--config``; keys are the long option
names with dashes replaced by underscores, and flags given on the command line
win over the file.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure,
4 diagnostic failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArchiveError, DataError, SamplerError, SingularMatrixError
from .forecast import FUNCTIONALS, forecast_functional_grid, regular_grid
from .geweke import GewekeInstance, run_geweke
from .io import (
    SCHEMA_VERSION,
    ChainArchive,
    config_hash,
    data_digest,
    export_grid,
    load_dataset,
    read_chain,
    read_observed,
    read_points,
    write_chain,
    write_observed,
    write_table,
)
from .model import ChainState, LinearModelState, PriorConfig
from .sampler import SamplerConfig, init_state, run_chain
from .simstudy import (
    KINDS,
    MODELS,
    SUMMARY_COLUMNS,
    Scenario,
    generate_replicate,
    run_study,
    station_layouts,
    true_delta,
    true_gamma,
)

log = logging.getLogger("rainfall_gp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_DIAGNOSTIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# option defaults per command; these are also the accepted config-file keys
DEFAULTS = {
    "simulate": dict(scenario="nonlinear", stations=31, years=4, events_per_cell=134,
                     grid_res=16, seed=0, layout=None, out=None),
    "fit": dict(data=None, stations_csv=None, daily_csv=None, threshold=0.1, year_range=None,
                model="semiparametric", iters=2000, burnin=500, thin=1, seed=0, fixed_counts=False,
                checkpoint_every=500, out=None),
    "forecast": dict(chain=None, grid_res=None, targets_csv=None, truth=None,
                     functional="event-mean", n_trials=365, seed=0, out=None),
    "study": dict(scenario="nonlinear", stations=31, replicates=8, iters=2000, burnin=500,
                  grid_res=16, seed=0, threads=None, layout=None, models=list(MODELS), out=None),
    "diagnose": dict(test="geweke", model="semiparametric", draws=100_000, seed=0,
                     conditionals="exact"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rainfall-gp", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(cmd, help_):
        sp = sub.add_parser(cmd, help=help_, description=help_)
        sp.add_argument("--config", help="JSON file with option values (flags override it)")
        return sp

    s = add("simulate", "write a synthetic dataset and its true parameter grid")
    s.add_argument("--scenario", choices=KINDS, help="true surface family (default nonlinear)")
    s.add_argument("--stations", type=int, help="number of stations M (default 31)")
    s.add_argument("--years", type=int, help="number of years T (default 4)")
    s.add_argument("--events-per-cell", type=int, help="wet days per station-year (default 134)")
    s.add_argument("--grid-res", type=int, help="truth grid pixels per axis (default 16)")
    s.add_argument("--layout", help="CSV of station coordinates overriding the built-in layout")
    s.add_argument("--seed", type=int, help="random seed (default 0)")
    s.add_argument("--out", help="output directory")

    f = add("fit", "run the MCMC sampler and write a chain archive")
    f.add_argument("--data", help="dataset directory written by 'simulate'")
    f.add_argument("--stations-csv", help="station metadata CSV (id,x,y,elevation)")
    f.add_argument("--daily-csv", help="daily rainfall CSV (id,date,rain_mm)")
    f.add_argument("--threshold", type=float, help="wet-day threshold in mm (default 0.1)")
    f.add_argument("--year-range", type=int, nargs=2, metavar=("FIRST", "LAST"),
                   help="inclusive range of years to keep")
    f.add_argument("--model", choices=MODELS, help="model to fit (default semiparametric)")
    f.add_argument("--iters", type=int, help="total scans (default 2000)")
    f.add_argument("--burnin", type=int, help="scans discarded before storing (default 500)")
    f.add_argument("--thin", type=int, help="store one scan in every THIN (default 1)")
    f.add_argument("--seed", type=int, help="random seed (default 0)")
    f.add_argument("--fixed-counts", action="store_const", const=True,
                   help="treat wet-day counts as fixed and skip the binomial block")
    f.add_argument("--checkpoint-every", type=int, help="scans between checkpoints (default 500)")
    f.add_argument("--resume", action="store_true", help="continue from the checkpoint next to --out")
    f.add_argument("--out", help="chain archive path")

    c = add("forecast", "summarize a rainfall functional at target points")
    c.add_argument("--chain", help="chain archive written by 'fit'")
    c.add_argument("--grid-res", type=int, help="regular grid over [-1,1]^2 with this many pixels per axis")
    c.add_argument("--targets-csv", help="CSV of target covariates in original units")
    c.add_argument("--truth", help="truth grid CSV from 'simulate' (targets for kl-vs-truth)")
    c.add_argument("--functional", help=f"one of {', '.join(FUNCTIONALS)} (default event-mean)")
    c.add_argument("--n-trials", type=int, help="days per year for annual functionals (default 365)")
    c.add_argument("--seed", type=int, help="random seed (default 0)")
    c.add_argument("--out", help="output CSV path")

    t = add("study", "run the replicated simulation study and write KL summaries")
    t.add_argument("--scenario", choices=KINDS, help="true surface family (default nonlinear)")
    t.add_argument("--stations", type=int, help="number of stations M (default 31)")
    t.add_argument("--replicates", type=int, help="independent replicates (default 8)")
    t.add_argument("--iters", type=int, help="scans per fit (default 2000)")
    t.add_argument("--burnin", type=int, help="burn-in scans per fit (default 500)")
    t.add_argument("--grid-res", type=int, help="KL grid pixels per axis (default 16)")
    t.add_argument("--layout", help="CSV of station coordinates overriding the built-in layout")
    t.add_argument("--models", nargs="+", choices=MODELS, help="models to compare (default both)")
    t.add_argument("--threads", type=int, help="worker processes (default: all cores)")
    t.add_argument("--seed", type=int, help="master seed (default 0)")
    t.add_argument("--out", help="output directory")

    d = add("diagnose", "validate the sampler against its joint distribution")
    d.add_argument("--test", choices=("geweke",), help="diagnostic to run (default geweke)")
    d.add_argument("--model", choices=MODELS, help="model to check (default semiparametric)")
    d.add_argument("--draws", type=int, help="draws per simulator (default 100000)")
    d.add_argument("--seed", type=int, help="random seed (default 0)")
    d.add_argument("--conditionals", choices=("exact", "printed"),
                   help="variance updates; 'printed' is a deliberately wrong mutation build")
    return p


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags, in increasing priority."""
    defaults = DEFAULTS[args.command]
    opts = dict(defaults)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        loaded.pop("schema_version", None)
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys for '{args.command}': {', '.join(unknown)}")
        opts.update(loaded)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    return opts


def _require(opts, *keys):
    for k in keys:
        if opts.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _positive(opts, *keys):
    for k in keys:
        if opts.get(k) is not None and int(opts[k]) <= 0:
            raise UsageError(f"--{k.replace('_', '-')} must be positive")


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(opts) -> int:
    _require(opts, "out")
    _positive(opts, "stations", "years", "events_per_cell", "grid_res")
    scenario = Scenario(kind=opts["scenario"], M=int(opts["stations"]), T=int(opts["years"]),
                        events_per_cell=int(opts["events_per_cell"]),
                        grid_resolution=int(opts["grid_res"]))
    layout = read_points(opts["layout"]) if opts["layout"] else station_layouts(scenario.M)
    if layout.shape != (scenario.M, 2):
        raise DataError(f"layout must hold {scenario.M} two-dimensional points")
    data = generate_replicate(scenario, layout, int(opts["seed"]))
    out = Path(opts["out"])
    write_observed(data, out / "data")
    grid = regular_grid(scenario.grid_resolution)
    rows = [(x, y, true_gamma((x, y), scenario.kind), true_delta((x, y), scenario.kind))
            for x, y in grid]
    write_table(out / "truth.csv", ("x", "y", "gamma", "delta"), rows)
    print(f"wrote {data.M} stations x {data.T} years ({data.n_events} events) to {out / 'data'}")
    print(f"wrote truth grid ({len(rows)} pixels) to {out / 'truth.csv'}")
    return EXIT_OK


def _load_fit_data(opts):
    if opts["data"]:
        return read_observed(opts["data"])
    if opts["stations_csv"] and opts["daily_csv"]:
        yr = tuple(opts["year_range"]) if opts["year_range"] else None
        return load_dataset(opts["stations_csv"], opts["daily_csv"], float(opts["threshold"]), yr)
    raise UsageError("fit needs --data or both --stations-csv and --daily-csv")


def _state_class(model):
    return ChainState if model == "semiparametric" else LinearModelState


def _save_checkpoint(path, chash, state, rows, iters, result_totals):
    payload = {
        "schema_version": SCHEMA_VERSION, "config_hash": chash, "iteration": state.iteration,
        "state": state.to_vector().tolist(), "rng": state.rng.bit_generator.state,
        "rows": [r.tolist() for r in rows], "iterations": [int(i) for i in iters],
        "totals": result_totals,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload))
    os.replace(tmp, path)


def cmd_fit(opts, resume=False) -> int:
    _require(opts, "out")
    _positive(opts, "iters", "thin", "checkpoint_every")
    data = _load_fit_data(opts)
    model = opts["model"]
    if model not in MODELS:
        raise UsageError(f"unknown model {model!r}")
    try:
        config = SamplerConfig(n_iterations=int(opts["iters"]), burn_in=int(opts["burnin"]),
                               thin=int(opts["thin"]), seed=int(opts["seed"]),
                               update_counts=not opts["fixed_counts"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    chash = config_hash({"model": model, "config": config.as_dict(), "data": data_digest(data)})
    out = Path(opts["out"])
    ckpt = out.with_name(out.name + ".ckpt.json")

    rows, iters = [], []
    totals = {"total_shrinks": 0, "max_shrinks_seen": 0, "n_repeats": 0, "scans": 0}
    if resume:
        if not ckpt.exists():
            raise UsageError(f"no checkpoint at {ckpt} to resume from")
        saved = json.loads(ckpt.read_text())
        if saved.get("config_hash") != chash:
            raise UsageError("checkpoint was written with a different configuration or dataset")
        rng = np.random.default_rng()
        rng.bit_generator.state = saved["rng"]
        state = _state_class(model).from_vector(np.asarray(saved["state"]), data.M, data.T, data.p,
                                                rng=rng, iteration=int(saved["iteration"]))
        rows = [np.asarray(r) for r in saved["rows"]]
        iters = list(saved["iterations"])
        totals = saved["totals"]
        log.info("resuming at scan %d", state.iteration)
    else:
        state = init_state(model, data, config)

    loglik_last = None
    step = int(opts["checkpoint_every"])
    while state.iteration < config.n_iterations:
        until = min(config.n_iterations, state.iteration + step)
        res = run_chain(model, data, config, state=state, until=until)
        state = res.final_state
        rows.extend(res.draws)
        iters.extend(int(i) for i in res.iterations)
        totals["total_shrinks"] += res.total_shrinks
        totals["max_shrinks_seen"] = max(totals["max_shrinks_seen"], res.max_shrinks_seen)
        totals["n_repeats"] += res.n_repeats
        totals["scans"] += len(res.loglik_trace)
        if res.loglik_trace:
            loglik_last = res.loglik_trace[-1]
        _save_checkpoint(ckpt, chash, state, rows, iters, totals)
        log.info("scan %d / %d", state.iteration, config.n_iterations)

    names = state.vector_names(data.M, data.T, data.p)
    header = {
        "model": model, "seed": config.seed, "M": data.M, "T": data.T, "p": data.p,
        "config": config.as_dict(), "config_hash": chash, "version": __version__,
        "points": data.points.tolist(), "station_ids": list(data.station_ids),
        "years": list(data.years),
        "transform": data.transform.as_dict() if data.transform is not None else None,
        "n_trials_mean": float(data.n_trials.mean()),
    }
    draws = np.vstack(rows) if rows else np.empty((0, len(names)))
    write_chain(ChainArchive(header, names, np.asarray(iters, dtype=int), draws), out)
    scans = max(totals["scans"], 1)
    print(f"wrote {draws.shape[0]} draws to {out}")
    print(f"ESS shrinks: total {totals['total_shrinks']}, mean per scan "
          f"{totals['total_shrinks'] / scans:.2f}, max in one move {totals['max_shrinks_seen']}")
    print(f"rejection-free check: {totals['n_repeats']} repeated coordinates "
          f"({'ok' if totals['n_repeats'] == 0 else 'FAILED'})")
    if loglik_last is not None:
        print(f"final log-likelihood: counts {loglik_last[0]:.3f}, magnitudes {loglik_last[1]:.3f}")
    return EXIT_OK


def cmd_forecast(opts) -> int:
    _require(opts, "chain", "out")
    functional = opts["functional"]
    if functional not in FUNCTIONALS:
        raise UsageError(f"unknown functional {functional!r}; choose from {', '.join(FUNCTIONALS)}")
    archive = read_chain(opts["chain"])
    h = archive.header
    truth = None
    if opts["truth"]:
        tab = read_points(opts["truth"], ("x", "y", "gamma", "delta"))
        targets = tab[:, :2]
        truth = (tab[:, 2], tab[:, 3])
        # truth grids live in the standardized space of simulated data
    elif opts["targets_csv"]:
        raw = read_points(opts["targets_csv"])
        targets = archive.transform.apply(raw) if archive.transform else raw
    elif opts["grid_res"]:
        _positive(opts, "grid_res")
        if int(h["p"]) != 2:
            raise UsageError("--grid-res needs two covariates; use --targets-csv")
        targets = regular_grid(int(opts["grid_res"]))
    else:
        raise UsageError("forecast needs --grid-res, --targets-csv or --truth")
    if functional == "kl-vs-truth" and truth is None:
        raise UsageError("kl-vs-truth needs --truth")
    if targets.shape[1] != int(h["p"]):
        raise DataError(f"targets have {targets.shape[1]} covariates, chain has {h['p']}")
    grid = forecast_functional_grid(archive.draws, archive.model, archive.points, int(h["M"]),
                                    int(h["T"]), targets, functional, seed=int(opts["seed"]),
                                    n_trials=int(opts["n_trials"]), truth=truth)
    transform = archive.transform if (opts["targets_csv"] and not opts["truth"]) else None
    export_grid(grid, opts["out"], transform)
    print(f"wrote {functional} at {targets.shape[0]} targets from {grid.n_draws} draws to {opts['out']}")
    if grid.n_clamped:
        print(f"note: {grid.n_clamped} conditional variances clamped to zero")
    return EXIT_OK


def cmd_study(opts) -> int:
    _require(opts, "out")
    _positive(opts, "stations", "replicates", "iters", "grid_res", "threads")
    scenario = Scenario(kind=opts["scenario"], M=int(opts["stations"]),
                        replicates=int(opts["replicates"]), grid_resolution=int(opts["grid_res"]))
    try:
        config = SamplerConfig(n_iterations=int(opts["iters"]), burn_in=int(opts["burnin"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    layout = read_points(opts["layout"]) if opts["layout"] else None
    result = run_study(scenario, tuple(opts["models"]), config, seed=int(opts["seed"]),
                       layout=layout, threads=opts["threads"])
    out = Path(opts["out"])
    write_table(out / "kl_summary.csv", SUMMARY_COLUMNS, result.rows())
    agg = [(scenario.kind, m, scenario.M, result.aggregate(m)) for m in result.models]
    write_table(out / "kl_aggregate.csv", ("scenario", "model", "M", "grid_mean_of_medians"), agg)
    for _, m, _, v in agg:
        print(f"{scenario.kind:<10s} {m:<15s} grid-mean KL {v:.6f}")
    if len(result.models) == 2:
        semi, par = result.aggregate("semiparametric"), result.aggregate("parametric")
        if scenario.kind == "nonlinear":
            ok = semi < par
            print(f"ordering check (semiparametric < parametric): {'ok' if ok else 'not met'}")
        else:
            ok = par <= 1.25 * semi
            print(f"ordering check (parametric within 25% of semiparametric or better): "
                  f"{'ok' if ok else 'not met'}")
    return EXIT_OK


def cmd_diagnose(opts) -> int:
    _positive(opts, "draws")
    report = run_geweke(opts["model"], int(opts["draws"]), GewekeInstance(), seed=int(opts["seed"]),
                        conditionals=opts["conditionals"], priors=PriorConfig(),
                        progress=lambda stage, i: log.info("%s simulator: %d", stage, i))
    for line in report.lines():
        print(line)
    print(f"{len(report.names)} test functions, max |z| = {np.max(np.abs(report.z)):.3f}: "
          f"{'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_DIAGNOSTIC


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        opts = resolve_options(args)
        if args.command == "simulate":
            return cmd_simulate(opts)
        if args.command == "fit":
            return cmd_fit(opts, resume=args.resume)
        if args.command == "forecast":
            return cmd_forecast(opts)
        if args.command == "study":
            return cmd_study(opts)
        return cmd_diagnose(opts)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ArchiveError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SingularMatrixError, SamplerError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

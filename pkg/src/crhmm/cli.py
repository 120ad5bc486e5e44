"""Command-line entry point: simulate, fit, blb, decode, report and pipeline.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
invalid input files), 4 numerical failure. The default worker count comes
from the CRHMM_WORKERS environment variable.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import blb as blbmod
from .config import RunConfig, load_config
from .dataio import (read_records, read_weights, write_csv, write_population, write_records,
                     write_trajectories, write_truth)
from .decoder import uncertain_sightings, viterbi_batch
from .engine import Objective
from .errors import ConfigError, CRHMMError, DataError
from .estimator import FitResult, fit_mle
from .likelihood import WORKERS_ENV, default_workers
from .population import population_series, registered_series
from .records import RecordBatch
from .simulator import SimulationConfig, simulate_population

log = logging.getLogger("crhmm")

RECORDS = "records.jsonl"
TRUTH = "truth.jsonl"
TRUTH_POPULATION = "truth_population.csv"
FIT = "fit.json"
BLB_LOG = "blb_log.jsonl"
BLB_RESULT = "blb.json"
TRAJECTORIES = "trajectories.jsonl"
POPULATION = "population.csv"
SIGHTINGS = "uncertain_sightings.csv"


def _setup(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if getattr(args, "workers", None):
        os.environ[WORKERS_ENV] = str(args.workers)
    return cfg, out


def _data_path(args, out: Path) -> Path:
    return Path(args.data) if args.data else out / RECORDS


def _load_batch(cfg: RunConfig, path: Path) -> RecordBatch:
    return RecordBatch.from_records(read_records(path, cfg.spec), cfg.spec)


def _load_fit(cfg: RunConfig, path: Path) -> FitResult:
    if not path.exists():
        raise DataError(f"fit result {path} not found; run the fit command first")
    fit = FitResult.from_json(path.read_text(), str(path))
    fit.check_names(cfg.spec)
    return fit


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg, out = _setup(args)
    if cfg.simulation is None:
        raise ConfigError(f"{cfg.source}: simulate needs a simulation section")
    sim = cfg.simulation
    params = cfg.true_params()
    records, truth = simulate_population(SimulationConfig(cfg.spec, params, sim.entries,
                                                          sim.frequencies, seed=cfg.seed))
    write_records(out / RECORDS, records, cfg.spec)
    write_truth(out / TRUTH, truth, cfg.spec, params)
    batch = RecordBatch.from_records(records, cfg.spec)
    series = population_series(truth.states, cfg.spec, present_roles=cfg.present_roles,
                               registered=registered_series(batch))
    write_population(out / TRUTH_POPULATION, series)
    print(f"simulated {len(records)} records over {cfg.spec.n_years} years "
          f"(entries per year {list(sim.entries)}); true present in {cfg.spec.last_year}: "
          f"{int(series.present[-1])}")
    return 0


def cmd_fit(args) -> int:
    cfg, out = _setup(args)
    batch = _load_batch(cfg, _data_path(args, out))
    weights = read_weights(args.weights, batch.ids) if args.weights else None
    obj = Objective(batch, weights, workers=default_workers())
    fit = fit_mle(batch, weights, init=cfg.initial_params(), options=cfg.fit, objective=obj)
    (out / FIT).write_text(fit.to_json() + "\n")
    n_se = 0 if fit.se_available is None else int(np.sum(~fit.se_available))
    print(f"fit {len(batch)} records: loglik {fit.loglik:.6f}, converged={fit.converged}, "
          f"iterations {fit.iterations}, max |gradient| {fit.gradient_max:.2e}"
          + (f", {n_se} standard error(s) unavailable" if n_se else ""))
    return 0 if fit.converged else 4


def cmd_blb(args) -> int:
    cfg, out = _setup(args)
    batch = _load_batch(cfg, _data_path(args, out))
    plan = cfg.blb_plan(len(batch))
    opts = replace(cfg.blb_options, workers=default_workers())
    result = blbmod.run_blb(plan, batch, opts, log_path=out / BLB_LOG, resume=args.resume)
    (out / BLB_RESULT).write_text(result.to_json() + "\n")
    fails = sum(result.failures().values())
    print(f"BLB: {plan.s} subsets of about {plan.b} records, {plan.r} resamples each, "
          f"{len(result.ok_cells())} fits kept, {fails} failed")
    return 0


def cmd_decode(args) -> int:
    cfg, out = _setup(args)
    batch = _load_batch(cfg, _data_path(args, out))
    fit = _load_fit(cfg, Path(args.fit) if args.fit else out / FIT)
    dec = viterbi_batch(batch, fit.estimate)
    write_trajectories(out / TRAJECTORIES, dec.trajectories(), cfg.spec)
    series = dec.population(cfg.present_roles, registered=registered_series(batch))
    write_population(out / POPULATION, series)
    rows = uncertain_sightings(dec, cfg.present_roles)
    write_csv(out / SIGHTINGS, ["Breakdown", "Category", "PersonYears", "PresentShare", "AbsentShare"],
              [[r["breakdown"], r["category"], r["person_years"], r["present_share"], r["absent_share"]]
               for r in rows], "uncertain_sightings")
    print(f"decoded {len(batch)} records; present in {cfg.spec.last_year}: {int(series.present[-1])}")
    return 0


def _interval_rows(iv):
    return [[lab, e, s, lo, hi] for lab, e, s, lo, hi in zip(iv.labels, iv.estimate, iv.se, iv.lower, iv.upper)]


def cmd_report(args) -> int:
    cfg, out = _setup(args)
    src = Path(args.blb) if args.blb else out / BLB_RESULT
    if src.suffix == ".jsonl" or not src.exists():
        log_path = src if src.suffix == ".jsonl" else src.with_name(BLB_LOG)
        if not log_path.exists():
            raise DataError(f"no BLB result at {src} and no per-resample log at {log_path}; run blb first")
        result = blbmod.load_log(log_path, cfg.spec)
        agg = result.aggregated
        if src.suffix != ".jsonl":
            src.write_text(result.to_json() + "\n")
    else:
        _, agg = blbmod.read_aggregate(src)
    written = []
    for series in (blbmod.POPULATION, blbmod.OVERCOVERAGE):
        if series in agg:
            iv = agg[series]
            write_csv(out / f"report_{series}.csv", ["Year", "Estimate", "Lower", "Upper"],
                      [[lab, e, lo, hi] for lab, e, lo, hi in zip(iv.labels, iv.estimate, iv.lower, iv.upper)],
                      f"{series}_table")
            write_csv(out / f"plot_{series}.csv", ["year", "estimate", "lower", "upper"],
                      [[int(lab), e, lo, hi] for lab, e, lo, hi in zip(iv.labels, iv.estimate, iv.lower, iv.upper)],
                      f"{series}_plot")
            written += [f"report_{series}.csv", f"plot_{series}.csv"]
    for table in (blbmod.PARAMETERS, blbmod.PROBABILITIES, blbmod.MARGINALS):
        if table in agg:
            write_csv(out / f"report_{table}.csv", ["Name", "Estimate", "SE", "Lower", "Upper"],
                      _interval_rows(agg[table]), f"{table}_table")
            written.append(f"report_{table}.csv")
    print("wrote " + ", ".join(written) if written else "no derived quantities to report")
    return 0


def cmd_pipeline(args) -> int:
    steps = [("simulate", cmd_simulate), ("fit", cmd_fit), ("blb", cmd_blb), ("decode", cmd_decode),
             ("report", cmd_report)]
    for name, fn in steps:
        print(f"== {name}")
        code = fn(args)
        if code:
            return code
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crhmm", description="Capture-recapture hidden Markov models for register data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--out", help="output directory (default: output.dir from the config)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--workers", type=int, help=f"worker threads (default: ${WORKERS_ENV} or 1)")
        if data:
            sp.add_argument("--data", help=f"record file, JSON lines or CSV (default: OUT/{RECORDS})")

    sp = sub.add_parser("simulate", help="simulate records and ground truth")
    common(sp, data=False)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="maximum likelihood fit")
    common(sp)
    sp.add_argument("--weights", help="CSV with columns id, weight")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("blb", help="bag of little bootstraps")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="skip cells already in the per-resample log")
    sp.set_defaults(func=cmd_blb)

    sp = sub.add_parser("decode", help="Viterbi trajectories and population series")
    common(sp)
    sp.add_argument("--fit", help=f"fit result JSON (default: OUT/{FIT})")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("report", help="tables and plot data from BLB results")
    common(sp, data=False)
    sp.add_argument("--blb", help=f"BLB result JSON or per-resample log (default: OUT/{BLB_RESULT})")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("pipeline", help="simulate, fit, blb, decode and report in one run")
    common(sp, data=False)
    sp.add_argument("--resume", action="store_true", help="resume the BLB step")
    sp.set_defaults(func=cmd_pipeline, data=None, weights=None, fit=None, blb=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers is not None and args.workers < 1:
        parser.error("--workers must be >= 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CRHMMError as exc:
        print(f"crhmm {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"crhmm {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

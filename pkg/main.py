"""
Command-line entry point: simulate | stationary | sweep | verify.

Exit codes: 0 success, 1 invalid manifest or arguments, 2 numerical failure,
3 verification failure. Failures also print a JSON report on stdout.
"""
import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from advanced.diagnostics import DifferenceProbe, convergence_detector, run_difference_experiment
from advanced.dynamics import run
from advanced.stationary import EquilibriumSet, buckling_mode, continuation, seed_search
from advanced.verification import CHECKS, require_all, run_suite
from config.manifest import (
    build_grid,
    build_initial,
    build_sim_config,
    expand_sweep,
    load_manifest,
    parse_manifest,
    serialize_manifest,
    single_run,
)
from config.settings import CSV_FLOAT_FORMAT, FORMAT_VERSION, configure_logging
from core.errors import HistoryError, ManifestError, NonFiniteFieldError, SolverError, VerificationError
from utils.field_utils import build_field
from utils.file_handler import (
    ensure_dir,
    write_catalog,
    write_diagnostics,
    write_difference,
    write_json,
    write_probes,
    write_snapshot,
    write_table,
)

logger = logging.getLogger("platelab")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2
EXIT_VERIFICATION = 3

SUMMARY_COLUMNS = ("cell", "U", "k", "beta", "load_amplitude", "verdict", "final_distance",
                   "decay_rate", "diss_total", "aborted")


class RunFailed(Exception):
    """A run finished but did not produce a usable result (aborted trajectory, empty catalog)."""


# --- Stationary ---

def build_catalog(manifest, grid, config):
    """Seed search, buckling guesses and the optional continuation branch in one catalog."""
    st = manifest.stationary
    eq_set = EquilibriumSet(st.dedup_tol)
    guesses = [build_field(grid, seed) for seed in st.seeds]
    if st.buckling_amplitudes:
        _, mode = buckling_mode(grid, st.gamma_dir)
        for a in st.buckling_amplitudes:
            guesses.extend([a * mode, -a * mode])
    seed_search(config, guesses, workers=st.workers, eq_set=eq_set)
    if st.continuation_path:
        continuation(st.continuation_path, config, guesses[0], st.continuation_parameter, eq_set)
    return eq_set


def cmd_stationary(manifest, out_dir):
    manifest = single_run(manifest)
    echo = serialize_manifest(manifest)
    grid = build_grid(manifest)
    config = build_sim_config(manifest, grid)
    eq_set = build_catalog(manifest, grid, config)
    path = write_catalog(os.path.join(out_dir, f"{manifest.name}_catalog.json"), eq_set, echo)
    if not len(eq_set):
        raise RunFailed("no Newton solve produced a certified equilibrium")
    return {"catalog": path, "members": len(eq_set), "branch_lost_at": eq_set.branch_lost_at}


# --- Simulation ---

def simulate_one(manifest, out_dir):
    """One trajectory (plus the optional difference experiment); returns a summary dict."""
    manifest = single_run(manifest)
    echo = serialize_manifest(manifest)
    grid = build_grid(manifest)
    config = build_sim_config(manifest, grid)
    u0, u1 = build_initial(manifest, grid)
    eq_set = build_catalog(manifest, grid, config) if manifest.probes.track_equilibria else None

    traj = run(config, grid, u0, u1, equilibria=eq_set)
    stem = os.path.join(out_dir, manifest.name)
    write_diagnostics(f"{stem}_records.csv", traj.records, echo,
                      {"lf_bound": CSV_FLOAT_FORMAT % traj.lf_bound, "lf_violations": traj.lf_violations})
    write_snapshot(f"{stem}_final.txt", traj.final_state.u, traj.final_state.t, echo)
    if traj.probe_rows:
        write_probes(f"{stem}_probes.csv", traj.probe_rows, echo)

    decay_rate = math.nan
    if manifest.difference.enabled and not traj.aborted:
        d = manifest.difference
        result = run_difference_experiment(
            config, grid, u0, u1, build_field(grid, d.perturbation),
            DifferenceProbe(nu=d.nu, mu=d.mu), d.burn_in)
        write_difference(f"{stem}_difference.csv", result, echo)
        if result.fit is not None:
            decay_rate = result.fit.rate

    sw = manifest.sweep
    verdict = convergence_detector(traj.records, sw.window, sw.tol, sw.dist_tol)
    last = traj.records[-1]
    sim = manifest.simulation
    return {
        "U": sim.U, "k": sim.k, "beta": sim.beta, "load_amplitude": sim.load.amplitude,
        "verdict": verdict.kind, "final_distance": last.dist_to_equilibria,
        "decay_rate": decay_rate, "diss_total": last.diss_total,
        "aborted": traj.aborted, "error": traj.error,
    }


def cmd_simulate(manifest, out_dir):
    summary = simulate_one(manifest, out_dir)
    if summary["aborted"]:
        raise RunFailed(summary["error"])
    return summary


# --- Sweep ---

def _run_cell(job):
    label, manifest_text, out_dir = job
    manifest = parse_manifest(manifest_text)
    cell_dir = ensure_dir(os.path.join(out_dir, label))
    summary = simulate_one(manifest, cell_dir)
    summary["cell"] = label
    return summary


def cmd_sweep(manifest, out_dir):
    cells = expand_sweep(manifest)
    jobs = [(label, serialize_manifest(cell), out_dir) for label, cell in cells]
    logger.info(f"Sweep of {len(jobs)} cell(s) on {manifest.workers} worker(s)")
    if manifest.workers == 1:
        summaries = [_run_cell(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=manifest.workers) as pool:
            summaries = list(pool.map(_run_cell, jobs))
    rows = [tuple(s[c] for c in SUMMARY_COLUMNS) for s in summaries]
    path = write_table(os.path.join(out_dir, f"{manifest.name}_summary.csv"), SUMMARY_COLUMNS, rows,
                       serialize_manifest(manifest))
    aborted = [s["cell"] for s in summaries if s["aborted"]]
    if aborted:
        raise RunFailed(f"aborted cells: {', '.join(aborted)}")
    return {"summary": path, "cells": len(summaries)}


# --- Verify ---

def cmd_verify(args):
    results = run_suite(args.check, quick=args.quick)
    report = {"format_version": FORMAT_VERSION, "quick": args.quick,
              "checks": [r.to_dict() for r in results]}
    if args.report:
        write_json(args.report, report)
    require_all(results)
    return {"checks": len(results), "passed": len(results)}


# --- Entry point ---

def build_parser():
    parser = argparse.ArgumentParser(
        prog="platelab",
        description="Clamped von Karman plate in subsonic flow via the delayed-potential reduction")
    parser.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("simulate", "integrate one trajectory"),
                            ("stationary", "build the equilibrium catalog"),
                            ("sweep", "run every cell of the manifest's sweep")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("manifest", help="path to a JSON experiment manifest")
        p.add_argument("--out", default=None, help="output directory (overrides output.directory)")
    p = sub.add_parser("verify", help="run the oracle checks")
    p.add_argument("--quick", action="store_true", help="small problem sizes for smoke testing")
    p.add_argument("--check", action="append", choices=sorted(CHECKS), help="run only this check")
    p.add_argument("--report", default=None, help="write the JSON check report here")
    return parser


def _fail(code, exc):
    report = {"status": "error", "exit_code": code, "error": type(exc).__name__, "detail": str(exc)}
    print(json.dumps(report))
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    configure_logging(args.log_level)
    try:
        if args.command == "verify":
            outcome = cmd_verify(args)
        else:
            manifest = load_manifest(args.manifest)
            out_dir = ensure_dir(args.out or manifest.output.directory)
            handler = {"simulate": cmd_simulate, "stationary": cmd_stationary, "sweep": cmd_sweep}
            outcome = handler[args.command](manifest, out_dir)
    except VerificationError as exc:
        logger.error(f"Verification failed: {exc}")
        return _fail(EXIT_VERIFICATION, exc)
    except (RunFailed, SolverError, NonFiniteFieldError, HistoryError, ArithmeticError) as exc:
        logger.error(f"Numerical failure: {exc}")
        return _fail(EXIT_NUMERICAL, exc)
    except (ManifestError, ValueError, OSError) as exc:
        logger.error(f"Invalid input: {exc}")
        return _fail(EXIT_INVALID, exc)
    print(json.dumps({"status": "ok", **outcome}, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

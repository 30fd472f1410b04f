"""Command-line front end: ``flexsim run | bench | selftest``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import SimulationError
from .reference import SOLVERS, bench, reference_run, write_bench
from .scenario import load_scenario, shipped_path, shipped_scenarios
from .selftest import run_selftest

log = logging.getLogger("flexsim")


def _resolve(path: str) -> str:
    """Accept a file path, or the bare name of a bundled scenario."""
    if not os.path.exists(path) and not path.endswith(".json") and path in shipped_scenarios():
        return shipped_path(path)
    return path


def _float_list(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _name_list(text):
    return [v for v in text.replace(",", " ").split() if v]


def cmd_run(args) -> int:
    sc = load_scenario(_resolve(args.scenario))
    overrides = {}
    if args.reltol is not None:
        overrides["rel_tol"] = args.reltol
    if args.abstol is not None:
        overrides["abs_tol"] = args.abstol
    run = sc.run(t_end=args.tend, **overrides)
    solver = args.solver or sc.solver["name"]
    wf, stats = SOLVERS[solver](run)
    out = Path(args.out)
    wf.to_csv(out)
    sidecar = out.with_suffix(".stats.json")
    with open(sidecar, "w") as fh:
        json.dump({**stats.as_dict(), "scenario": sc.name, "rel_tol": run.controller.rel_tol,
                   "abs_tol": run.controller.abs_tol, "t_span": list(run.t_span)}, fh,
                  indent=2)
    print(f"{solver}: {stats.accepted} steps, {stats.f_evals} f-evals, "
          f"avg order {stats.avg_order:.2f} -> {out}")
    return 0


def cmd_bench(args) -> int:
    sc = load_scenario(_resolve(args.scenario))
    run = sc.run(t_end=args.tend)
    ref, _ = reference_run(run)
    cells = bench(run, args.tolerances, args.solvers, sc.metric_abs_tol, ref)
    out = Path(args.out)
    json_path = out.with_suffix(".json")
    csv_path = out.with_suffix(".csv")
    write_bench(cells, json_path, csv_path)
    print(f"{'solver':<8}{'rel_tol':>10}{'steps':>8}{'f_evals':>9}{'order':>7}{'err_rel':>11}")
    for c in cells:
        if c.error:
            print(f"{c.solver:<8}{c.rel_tol:>10.0e}  failed: {c.error}")
        else:
            print(f"{c.solver:<8}{c.rel_tol:>10.0e}{c.steps:>8}{c.f_evals:>9}"
                  f"{c.avg_order:>7.2f}{c.err_rel:>11.2e}")
    print(f"report -> {json_path}, {csv_path}")
    return 0


def cmd_selftest(args) -> int:
    return 1 if run_selftest(inject_fault=args.inject_fault) else 0


def build_parser():
    p = argparse.ArgumentParser(prog="flexsim",
                                description="Hybrid switched-circuit simulator with a "
                                            "variable-order Taylor integrator.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and write a CSV waveform")
    r.add_argument("scenario", help="scenario JSON file or bundled scenario name")
    r.add_argument("--solver", choices=sorted(SOLVERS))
    r.add_argument("--reltol", type=float)
    r.add_argument("--abstol", type=float)
    r.add_argument("--tend", type=float, help="override the end time (s)")
    r.add_argument("--out", required=True, help="CSV output path; stats go to *.stats.json")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="tolerance sweep against a DP45 reference")
    b.add_argument("scenario")
    b.add_argument("--tolerances", type=_float_list, default=[1e-3, 1e-4, 1e-5, 1e-6, 1e-7],
                   help="comma-separated relative tolerances")
    b.add_argument("--solvers", type=_name_list, default=["taylor", "dp45", "bs23"])
    b.add_argument("--tend", type=float)
    b.add_argument("--out", required=True, help="report path stem (.json and .csv written)")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("selftest", help="run the invariant battery")
    s.add_argument("--inject-fault", action="store_true",
                   help="perturb one stencil weight to exercise the failure path")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    level = os.environ.get("FLEXSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "solvers", None):
        bad = [s for s in args.solvers if s not in SOLVERS]
        if bad:
            print(f"flexsim: unknown solver(s) {', '.join(bad)}", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (SimulationError, OSError) as exc:
        print(f"flexsim {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

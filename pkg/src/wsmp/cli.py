"""Command line entry point.

    wsmp run <spec.yaml> [--out DIR] [--seeds K] [--jobs J] [--diag] [--strict]
    wsmp plot <trace-dir>
    wsmp moments <spec.yaml> --jmax J --trials T

Exit codes: 0 success, 2 invalid spec, 3 a run diverged under --strict.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np

from . import harness, operators

EXIT_OK = 0
EXIT_SPEC = 2
EXIT_DIVERGED = 3


def _cmd_run(args) -> int:
    spec = harness.load_spec(args.spec)
    if args.seeds is not None:
        if args.seeds < 1:
            raise harness.SpecError("--seeds: must be >= 1")
        spec = replace(spec, seeds=list(range(args.seeds)))
    summary = harness.run_experiment(spec, out_dir=args.out, jobs=args.jobs, diag=args.diag)
    diverged = 0
    for name, block in summary["algorithms"].items():
        counts = block["status_counts"]
        diverged += counts.get("diverged", 0)
        final = [m for m in block["mean_nmse"] if m == m]
        tail = f"{10 * np.log10(final[-1]):.2f} dB" if final else "n/a"
        print(f"{name}: final mean NMSE {tail}, statuses {counts}")
    if args.strict and diverged:
        print(f"{diverged} run(s) diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_plot(args) -> int:
    paths = harness.emit_plot_data(args.trace_dir, args.out)
    print(f"wrote {paths['csv']} and {paths['svg']}")
    return EXIT_OK


def _cmd_moments(args) -> int:
    spec = harness.load_spec(args.spec)
    problem = harness.build_problem(spec.problem, harness.problem_seed(spec, args.seed))
    model = problem.model
    mc = operators.spectral_moments_mc(model, args.jmax, args.trials, args.seed)
    exact = operators.spectral_info_exact(model, args.jmax) if model.spectrum is not None else None
    rows = []
    for j in range(1, args.jmax + 1):
        row = {"j": j, "chi_mc": float(mc.chi[j])}
        if exact is not None:
            row["chi_exact"] = float(exact.chi[j])
            row["rel_err"] = float(abs(mc.chi[j] / exact.chi[j] - 1))
        rows.append(row)
    out = {"lambda_min": mc.lambda_min, "lambda_max": mc.lambda_max, "lambda_dagger": mc.lambda_dagger,
           "trials": args.trials, "moments": rows}
    json.dump(out, sys.stdout, indent=2)
    print()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wsmp", description="Warm-started long-memory message passing experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment spec")
    r.add_argument("spec")
    r.add_argument("--out", default=None, help="output directory (default: current)")
    r.add_argument("--seeds", type=int, default=None, help="override the seed count")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--diag", action="store_true", help="also dump gamma, nu, eta and cond(Psi)")
    r.add_argument("--strict", action="store_true", help="exit 3 if any run diverged")
    r.set_defaults(func=_cmd_run)

    pl = sub.add_parser("plot", help="aggregate a trace directory into CSV + SVG")
    pl.add_argument("trace_dir")
    pl.add_argument("--out", default=None)
    pl.set_defaults(func=_cmd_plot)

    m = sub.add_parser("moments", help="Monte Carlo spectral moments of the spec's operator")
    m.add_argument("spec")
    m.add_argument("--jmax", type=int, required=True)
    m.add_argument("--trials", type=int, default=1000)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=_cmd_moments)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except harness.SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except FileNotFoundError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())

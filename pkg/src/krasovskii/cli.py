"""Command-line entry point ``krasovskii``.

Exit codes: 0 ok, 1 audit violation, 2 solver failure, 3 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .dynamics import DomainViolation, IllPosed, StepFailure
from .numerics import NonConvergence, SingularJacobian
from .plants.base import InfeasibleReference, InvariantViolation
from .scenario import ConfigError, Scenario, load

EXIT_OK, EXIT_VIOLATION, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2, 3

SOLVER_ERRORS = (StepFailure, NonConvergence, SingularJacobian, IllPosed, DomainViolation)
CONFIG_ERRORS = (ConfigError, InfeasibleReference, InvariantViolation, ValueError, KeyError)


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (argparse would exit 2, the solver-failure code)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--delta", type=float, help="sampling period override")
    common.add_argument("--horizon", type=float, help="simulated time override")
    common.add_argument("--seed", type=int, help="random seed override")
    common.add_argument("--out-dir", default=".", help="directory for CSV output (default: current)")
    common.add_argument("--tolerance", type=float, help="audit tolerance for verify")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="krasovskii", description="Sampled Krasovskii passivity toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "run the closed loop and write CSV traces"),
                       ("equilibrium", "print the equilibrium and its residual"),
                       ("compare", "sampled inputs next to the fine-step continuous loop")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("scenario")
    sp = sub.add_parser("verify", parents=[common], help="run an audit suite")
    sp.add_argument("scenario")
    sp.add_argument("suite", choices=ex.SUITES)
    return p


def _scenario(args) -> Scenario:
    scn = load(args.scenario)
    return scn.override(delta=args.delta, horizon=args.horizon, seed=args.seed)


def _print_report(rep: ex.RunReport) -> None:
    for key, val in rep.metrics.items():
        print(f"{key}: {val}")
    for key, r in rep.reports.items():
        status = "ok" if r.satisfied else "VIOLATED"
        label, worst = ("max_deviation", r.max_deviation) if r.equality else ("max_violation", r.max_violation)
        print(f"{key}: {label}={worst:.3e} tolerance={r.tolerance:.1e} {status}")


def _simulate(args) -> int:
    rep = ex.simulate(_scenario(args))
    rep.write(args.out_dir)
    _print_report(rep)
    return EXIT_OK


def _verify(args) -> int:
    rep = ex.verify(_scenario(args), args.suite, args.tolerance)
    rep.write(args.out_dir)
    _print_report(rep)
    return EXIT_OK if rep.audits_ok else EXIT_VIOLATION


def _equilibrium(args) -> int:
    eq = ex.equilibrium(_scenario(args))
    with np.printoptions(precision=10, suppress=True):
        for key, val in eq.items():
            print(f"{key}: {val}")
    return EXIT_OK


def _compare(args) -> int:
    header, table = ex.compare(_scenario(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([int(row[0])] + [f"{v:.15g}" for v in row[1:]])
    print(f"wrote {out / 'compare.csv'} ({len(table)} rows)")
    return EXIT_OK


COMMANDS = {"simulate": _simulate, "verify": _verify, "equilibrium": _equilibrium, "compare": _compare}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SOLVER_ERRORS as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

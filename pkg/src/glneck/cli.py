"""Command line: glneck {solve,sweep,neck,spectrum,verify}.

Exit codes: 0 success, 1 numerical failure, 2 usage or config error.
GLNECK_THREADS caps the BLAS/OpenMP pool width.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, load_config
from .pipeline import NumericalFailure, UsageError, locked, run_neck, run_solve, run_spectrum, run_sweep

log = logging.getLogger("glneck")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="glneck", description="Ginzburg-Landau neck analysis")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_, config=False, out=True):
        s = sub.add_parser(name, help=help_)
        if config:
            s.add_argument("--config", required=True, type=Path, help="scenario INI file")
        if out:
            s.add_argument("--out", required=True, type=Path, help="run directory")
        s.add_argument("--seed", type=int, default=None, help="override solver.seed")
        return s

    add("solve", "minimise and refine at the first epsilon", config=True)
    add("sweep", "epsilon continuation with concentration detection", config=True)
    s = add("neck", "annulus ledgers and Hodge reports for a sweep run")
    s.add_argument("--eta", type=float, default=None, help="neck outer radius")
    s = add("spectrum", "weighted spectra and the index report")
    s.add_argument("--weight", default=None, help="weight family for the GL operator")
    s.add_argument("--num-eigs", type=int, default=None, help="eigenpairs per operator")
    s = sub.add_parser("verify", help="run an acceptance suite")
    s.add_argument("--suite", required=True, help="identities, wente, lorentz, spectral, sweep or all")
    s.add_argument("--out", type=Path, default=None, help="directory for the JSON result")
    s.add_argument("--seed", type=int, default=0)
    return p


def _threads() -> int | None:
    raw = os.environ.get("GLNECK_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GLNECK_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"GLNECK_THREADS must be a positive integer, got {raw!r}")
    return n


def _load(args):
    spec = load_config(args.config)
    if args.seed is not None:
        spec.solver.seed = args.seed
    return spec


def dispatch(args) -> int:
    cmd = args.command
    if cmd == "verify":
        from .verify import run_suite

        report = run_suite(args.suite, seed=args.seed, out=args.out)
        print(report.table())
        if args.out is None:
            print(json.dumps(report.to_json(), indent=2, sort_keys=True))
        return EXIT_OK if report.passed else EXIT_NUMERIC
    if cmd in ("solve", "sweep"):
        spec = _load(args)
        with locked(args.out):
            man = (run_solve if cmd == "solve" else run_sweep)(spec, args.out)
        for w in man.get("stages", {}).get(cmd, {}).get("warnings", []):
            log.warning(w)
        return EXIT_OK
    with locked(args.out):
        if cmd == "neck":
            man = run_neck(args.out, args.eta)
            if man["stages"]["neck"]["status"] == "no-neck":
                print("no-neck")
        else:
            if args.seed is not None:
                run_spectrum(args.out, args.weight, args.num_eigs, seed=args.seed)
            else:
                run_spectrum(args.out, args.weight, args.num_eigs)
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        with threadpool_limits(limits=_threads()):
            return dispatch(args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"glneck: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"glneck: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

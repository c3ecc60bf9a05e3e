"""Command line front-end: simulate, infer, learn, evaluate, bench.

Exit codes: 0 success, 2 validation error, 3 runtime failure, 4 numerical
failure.  The log level is taken from ECMP_LOG_LEVEL.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_NUMERICAL = 0, 2, 3, 4
COMMANDS = ("simulate", "infer", "learn", "evaluate", "bench")
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def parser():
    p = argparse.ArgumentParser(prog="ecmp", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="YAML experiment configuration")
    p.add_argument("--seed", type=int, default=0, help="run seed (non-negative)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="data directory written by 'simulate' (infer, learn)")
    p.add_argument("--artifacts", help="directory of earlier outputs to evaluate")
    p.add_argument("--threads", type=int, default=1, help="worker threads for seed sweeps")
    p.add_argument("--single-core", action="store_true", help="restrict BLAS and numba to one thread")
    return p


def main(argv=None):
    args = parser().parse_args(argv)
    if args.single_core:
        # effective only when set before numpy and numba load, i.e. from the console script
        for v in _THREAD_VARS:
            os.environ[v] = "1"
    logging.basicConfig(level=os.environ.get("ECMP_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import NumericalError, RuntimeFailure, ValidationError

    try:
        if args.seed < 0 or args.threads < 1:
            raise ValidationError("--seed must be non-negative and --threads positive")
        from . import commands
        if args.single_core:
            commands.single_core()
        getattr(commands, f"cmd_{args.command}")(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (RuntimeFailure, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

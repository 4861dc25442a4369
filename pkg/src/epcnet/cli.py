"""Command-line interface.

Subcommands: generate | train | eval | lambda-sweep | landscape | bench.
Each takes a JSON config file plus optional dotted-key overrides
(--set train.total_iterations=500). Exit codes: 0 success, 2 config
error, 3 training divergence, 4 capacity error.

Heavy imports happen after argument parsing so that --single-thread can
pin the BLAS thread pools through the environment before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epcnet",
        description="Power control on the K-user interference channel: "
                    "train neural controllers, evaluate them against "
                    "classical baselines, and reproduce the experiment suite.",
    )
    parser.add_argument(
        "--single-thread", action="store_true",
        help="pin BLAS/OpenMP to one thread (set before numpy loads)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out-dir", default=None, help="override the output dir")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key config override, value parsed as JSON")

    for name, helptext in [
        ("generate", "write seeded dataset splits"),
        ("train", "train the ensemble members and write the manifest"),
        ("eval", "evaluate the ensemble and baselines on a dataset"),
        ("lambda-sweep", "train/evaluate one ensemble per penalty weight"),
        ("landscape", "restart-spread statistics of the iterative solver"),
        ("bench", "wall-clock runtime per controller"),
    ]:
        p = sub.add_parser(name, help=helptext)
        common(p)
        if name == "eval":
            p.add_argument("--manifest", required=True)
            p.add_argument("--dataset", required=True)
        if name == "lambda-sweep":
            p.add_argument("--lambdas", required=True,
                           help="comma-separated penalty weights")
        if name == "bench":
            p.add_argument("--manifest", default=None)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--single-thread" in argv:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = "1"
    args = _build_parser().parse_args(argv)

    from .errors import CapacityError, ConfigError, TrainingDivergenceError
    from . import harness

    try:
        config = harness.load_config(args.config, args.set)
        if args.seed is not None:
            config.seed = args.seed
        if args.out_dir is not None:
            config.out_dir = args.out_dir

        if args.command == "generate":
            for path in harness.cmd_generate(config):
                print(path)
        elif args.command == "train":
            print(harness.cmd_train(config))
        elif args.command == "eval":
            print(harness.cmd_eval(config, args.manifest, args.dataset))
        elif args.command == "lambda-sweep":
            lambdas = [float(x) for x in args.lambdas.split(",") if x]
            print(harness.cmd_lambda_sweep(config, lambdas))
        elif args.command == "landscape":
            print(harness.cmd_landscape(config))
        elif args.command == "bench":
            print(harness.cmd_bench(config, args.manifest))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

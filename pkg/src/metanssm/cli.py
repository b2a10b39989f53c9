"""Command-line entry point.

Verbs: make-source, meta-train, adapt, track, report.  Every verb takes
--config/--seed/--out/--algorithm (report only needs --out).  Exit codes:
0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .experiments import (
    cmd_adapt,
    cmd_make_source,
    cmd_meta_train,
    cmd_report,
    cmd_track,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metanssm",
        description="Meta-train neural state-space models and run adaptive tracking MPC.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in (
        ("make-source", True),
        ("meta-train", True),
        ("adapt", True),
        ("track", True),
        ("report", False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs_config, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="master seed (default: first in config)")
        p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
        p.add_argument(
            "--algorithm",
            choices=("imaml", "maml", "supervised"),
            default="imaml",
            help="training/adaptation algorithm",
        )
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else None
        if args.command == "report":
            out = args.out or (config.out_dir if config else None)
            if out is None:
                raise ConfigError("report needs --out or --config")
            print(cmd_report(out))
            return EXIT_OK
        seed = args.seed if args.seed is not None else config.seeds[0]
        out = args.out or config.out_dir
        if args.command == "make-source":
            print(cmd_make_source(config, seed, out))
        elif args.command == "meta-train":
            print(cmd_meta_train(config, seed, out, args.algorithm))
        elif args.command == "adapt":
            print(cmd_adapt(config, seed, out, args.algorithm))
        elif args.command == "track":
            print(cmd_track(config, seed, out, args.algorithm))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

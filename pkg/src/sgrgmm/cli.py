"""Command-line harness: ``sgrgmm <command> --out <dir> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError
from .experiments import EXPERIMENTS, resolve_config, run_experiment


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sgrgmm",
        description="Reproduce the benchmark experiments of the robust "
        "moment-estimation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        cmd = sub.add_parser(name, help=f"run the {name} experiment")
        cmd.add_argument("--config", type=Path, default=None,
                         help="JSON config file overriding the defaults")
        cmd.add_argument("--out", type=Path, required=True,
                         help="output directory for CSVs and the resolved config")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--trials", type=int, default=None)
        cmd.add_argument("--fast", action="store_true",
                         help="shrink trial counts and iteration budgets for CI")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = None
        if args.config is not None:
            try:
                overrides = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}")
        cfg = resolve_config(
            args.command,
            overrides=overrides,
            seed=args.seed,
            trials=args.trials,
            fast=args.fast,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        path = run_experiment(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - harness boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

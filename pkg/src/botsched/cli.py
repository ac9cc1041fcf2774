"""Command-line entry point: ``botsched run experiment.yaml``."""

from __future__ import annotations

import argparse
import logging
import sys

from botsched.config import STRATEGIES, load_config
from botsched.errors import ConfigError, SchedulingError
from botsched.experiment import run_experiment


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="botsched",
        description="Schedule a bag of tasks on spot, burstable and on-demand VMs and simulate hibernations.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (strategy, scenario, replication) of a config")
    run.add_argument("config", help="experiment YAML file")
    run.add_argument("-o", "--output-dir", help="override output_dir from the config")
    run.add_argument("-s", "--seed", type=int, help="override the master seed")
    run.add_argument(
        "--strategy", action="append", choices=STRATEGIES, dest="strategies",
        help="only run this strategy (repeatable)",
    )
    run.add_argument("--no-trace", action="store_true", help="skip per-run event traces")
    run.add_argument("-j", "--workers", type=int, default=1, help="worker processes (default 1)")
    run.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")

    check = sub.add_parser("check", help="validate a config file and exit")
    check.add_argument("config")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "check":
        print(f"{args.config}: ok ({len(config.job.tasks)} tasks, {len(config.scenarios)} scenarios)")
        return 0

    try:
        result = run_experiment(
            config,
            output_dir=args.output_dir,
            strategies=args.strategies,
            seed=args.seed,
            trace=not args.no_trace,
            workers=args.workers,
        )
    except SchedulingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if result.comparison is not None:
        print(result.comparison.text(), end="")
    for err in result.errors:
        print(f"integrity error: {err}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

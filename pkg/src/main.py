import os
import sys
import logging
import argparse
from pathlib import Path
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv

from .config_loader import load_config, resolve_seed
from .engine import EngineEnvironment, run_sim, sweep, train_policy
from .errors import ConfigError, UsageError
from .grouping import QTable, oracle_best
from .models import OutputFormat, SweepAxis
from .report_writer import emit_report, emit_sweep, emit_training, format_float

logger = logging.getLogger("muvis")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting on bad input"""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="muvis",
        description="MU-MIMO grouping and QoE-constrained video streaming simulator",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="{train,run,sweep,oracle}")
    subparsers.required = True

    def common(sub):
        sub.add_argument("--config", required=True, help="Scenario JSON file")
        sub.add_argument("--seed", type=int, default=None, help="Overrides the scenario seed and MUVIS_SEED")
        sub.add_argument("--out", default="out", help="Output directory")
        sub.add_argument("--format", choices=[f.value for f in OutputFormat], default=OutputFormat.CSV.value)

    train = subparsers.add_parser("train", help="Learn a grouping policy, write qtable.json")
    common(train)
    train.add_argument("--expected-mobility", action="store_true",
                       help="Judge mobility from user speeds instead of sounded CSI")

    run = subparsers.add_parser("run", help="Simulate a scenario and write reports")
    common(run)
    run.add_argument("--qtable", default=None, help="Q-table from a previous train")

    sweep_cmd = subparsers.add_parser("sweep", help="Full-MU vs all-SU throughput across levels")
    common(sweep_cmd)
    sweep_cmd.add_argument("--axis", choices=[a.value for a in SweepAxis], required=True)
    sweep_cmd.add_argument("--levels", type=int, nargs="+", required=True)
    sweep_cmd.add_argument("--seeds", type=int, nargs="+", default=None,
                           help="Seeds to repeat every level with (default: the resolved seed)")
    sweep_cmd.add_argument("--workers", type=int, default=1)

    oracle = subparsers.add_parser("oracle", help="Print the brute-force best grouping")
    common(oracle)
    return parser


def configure_logging() -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    log_file = os.getenv("LOG_FILE")
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, os.getenv("LOG_LEVEL", "INFO").upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def _load_qtable(path: str) -> QTable:
    try:
        return QTable.from_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read Q-table: {e.strerror or e}", path) from e
    except (ValueError, KeyError) as e:
        raise ConfigError(f"invalid Q-table: {e}", path) from e


def _cmd_train(args, config, seed) -> None:
    result = train_policy(config, seed, sounded=not args.expected_mobility)
    emit_training(result, args.out)
    print(f"{result.best_partition.canonical()} {format_float(result.best_reward)}")


def _cmd_run(args, config, seed) -> None:
    qtable = _load_qtable(args.qtable) if args.qtable else None
    report = run_sim(config, seed, qtable=qtable)
    emit_report(report, args.format, args.out)


def _cmd_sweep(args, config, seed) -> None:
    seeds = args.seeds if args.seeds else [seed]
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    for level in args.levels:
        if not 0 <= level <= len(config.users):
            raise ConfigError(f"level {level} outside 0..{len(config.users)}", "--levels")
    rows = sweep(config, SweepAxis(args.axis), args.levels, seeds, workers=args.workers)
    emit_sweep(rows, args.out)


def _cmd_oracle(args, config, seed) -> None:
    env = EngineEnvironment(config, np.random.default_rng(seed))
    partition = oracle_best(env.users, config.ap, env, threshold=config.loss.mobility_threshold)
    print(f"{partition.canonical()} {format_float(env.evaluate(partition).aggregate_mbps)}")


COMMANDS = {
    "train": _cmd_train,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "oracle": _cmd_oracle,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code"""
    load_dotenv()
    configure_logging()
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()

    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        logger.error(f"Usage error: {str(e)}")
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if not e.code else EXIT_USAGE

    try:
        config = load_config(args.config)
        seed = resolve_seed(args.seed, config)
    except ConfigError as e:
        logger.error(f"Config error: {str(e)}")
        return EXIT_CONFIG

    try:
        COMMANDS[args.command](args, config, seed)
    except UsageError as e:
        logger.error(f"Usage error: {str(e)}")
        return EXIT_USAGE
    except ConfigError as e:
        logger.error(f"Config error: {str(e)}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"Error running {args.command}: {str(e)}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

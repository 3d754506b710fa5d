"""
Command-line router: run, compare, validate-config, list-presets.

Exit codes: 0 success, 2 configuration or schema error, 3 numerical
divergence, 4 comparison beyond tolerance.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import DEFAULT_THREADS, LOG_LEVEL, list_presets, load_config, validate_config
from .errors import LowRankKBError
from .experiments import check_tolerance, compare_runs, run

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _configure_logging(verbose: int) -> None:
    if verbose >= 1:
        level = logging.DEBUG
    else:
        level = getattr(logging, LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lowrank-kbp",
        description="Low-rank Kalman-Bucy filtering studies",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="DEBUG logging")
    verbs = parser.add_subparsers(dest="verb", required=True)

    p_run = verbs.add_parser("run", help="Run a study from a TOML config, preset name or config.json snapshot")
    p_run.add_argument("config", help="Config file or preset name")
    p_run.add_argument("--seed", type=int, help="Override the master seed")
    p_run.add_argument("--threads", type=int, default=DEFAULT_THREADS, help="Replicate worker threads")
    p_run.add_argument("--output", type=Path, help="Output root directory")
    p_run.add_argument("--force", action="store_true",
                       help="Write to <output>/<name> (replacing it) instead of a timestamped directory")
    p_run.add_argument("--dump-modes", action="store_true", help="Write LRKB snapshots of the low-rank factors")

    p_cmp = verbs.add_parser("compare", help="Compare the CSV outputs of two run directories")
    p_cmp.add_argument("run_a", type=Path)
    p_cmp.add_argument("run_b", type=Path)
    p_cmp.add_argument("--tolerance", type=float, help="Exit with code 4 when any deviation exceeds this")

    p_val = verbs.add_parser("validate-config", help="Parse and validate a config without running it")
    p_val.add_argument("config", help="Config file or preset name")

    verbs.add_parser("list-presets", help="List the bundled presets")
    return parser


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.dump_modes:
        config.output.dump_modes = True
    root = run(config, output_root=args.output, threads=args.threads, force=args.force)
    print(root)
    return 0


def _cmd_compare(args) -> int:
    report = compare_runs(args.run_a, args.run_b)
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.tolerance is not None:
        check_tolerance(report, args.tolerance)
    return 0


def _cmd_validate(args) -> int:
    config = load_config(args.config)
    warnings = validate_config(config)
    print(f"{args.config}: valid ({config.study.kind}, {config.filter.kind}, "
          f"{config.study.replicates} replicate(s))")
    for message in warnings:
        print(f"warning: {message}")
    return 0


def _cmd_list_presets(args) -> int:
    for name in list_presets():
        print(name)
    return 0


HANDLERS = {
    "run": _cmd_run,
    "compare": _cmd_compare,
    "validate-config": _cmd_validate,
    "list-presets": _cmd_list_presets,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return HANDLERS[args.verb](args)
    except LowRankKBError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

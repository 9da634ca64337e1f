"""
RaterLab command-line entry point.

    python -m cli.main <command> [options]

Exit codes: 0 success, 1 domain error or flagged result, 2 usage error.
Commands return the flags their results carry (a STAPLE run that hit its
iteration cap, an undefined regression); outputs are still written, but the
run exits 1.
"""
import argparse
import sys
import time
from typing import List, Optional

from pydantic import ValidationError

from cli.arguments import positive_int, seed_value
from cli.commands import COMMANDS
from cli.models import RunConfig
from config.settings import resolve_threads, settings
from services.errors import RaterLabError
from utils.logger import get_logger, log_error, log_stage_complete, log_stage_start, setup_logging

logger = get_logger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _common_options(defaults: bool) -> argparse.ArgumentParser:
    # Accepted before and after the subcommand; the subcommand copy only overrides when given.
    parser = argparse.ArgumentParser(add_help=False)
    suppress = argparse.SUPPRESS
    parser.add_argument("--seed", type=seed_value, default=0 if defaults else suppress, help="root random seed")
    parser.add_argument("--threads", type=positive_int, default=None if defaults else suppress,
                        help="worker threads (RATERLAB_THREADS overrides)")
    parser.add_argument("--log-level", type=str.upper, choices=LOG_LEVELS,
                        default=settings.log_level.upper() if defaults else suppress)
    return parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raterlab",
        description="Rater style, label fusion and uncertainty analysis for multi-rater segmentations.",
        parents=[_common_options(defaults=True)],
    )
    parser.add_argument("--version", action="version", version=f"{settings.app_name} {settings.app_version}")
    subparsers = parser.add_subparsers(dest="command", metavar="<command>")
    subparsers.required = True
    parents = [_common_options(defaults=False)]
    for command in COMMANDS:
        command.add_parser(subparsers, parents)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """
    Parse ``argv`` and execute the subcommand.

    Args:
        argv: Arguments without the program name (default: ``sys.argv[1:]``)

    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) if not isinstance(e.code, str) else 2

    setup_logging(args.log_level)
    threads = resolve_threads(args.threads)
    config = RunConfig.from_args(args, threads)

    start = time.time()
    log_stage_start(args.command, seed=config.seed, threads=threads)
    try:
        flags = args.handler(args, config) or []
    except (RaterLabError, ValidationError, OSError) as e:
        log_error(e, {"command": args.command})
        return 1
    log_stage_complete(args.command, time.time() - start)
    if flags:
        logger.warning(f"{args.command} finished with flagged conditions: {', '.join(flags)}")
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

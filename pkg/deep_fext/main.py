""" Boots the command-line toolkit """
import argparse
import logging
import sys
from typing import List, Optional

from .config import settings
from .commands import evaluate, predict, tools, train
from .models.exceptions import FextError

logger = logging.getLogger("deep_fext")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USER = 2


def build_parser() -> argparse.ArgumentParser:
    """Top-level parser with every command group included."""
    parser = argparse.ArgumentParser(
        prog="deep-fext",
        description="Multi-scale feature extraction for retinal vessel and centerline segmentation."
    )
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="overrides DEEP_FEXT_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)
    tools.register(subparsers)
    train.register(subparsers)
    predict.register(subparsers)
    evaluate.register(subparsers)
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr
    )


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one command and return its exit code.

    0 on success, 2 for user or input errors (including argument errors),
    1 for anything unexpected.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code in (0, None) else EXIT_USER
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except FextError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USER
    except FileNotFoundError as err:
        print(f"error: path not found: {err.filename}", file=sys.stderr)
        return EXIT_USER
    except Exception:  # pylint: disable=broad-exception-caught
        logger.exception("command '%s' failed", args.command)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

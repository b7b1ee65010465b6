import argparse
import sys

import structlog

from src import __version__
from src.cli.commands.scene import register
from src.core.errors import SceneFitError
from src.core.logging import configure_logging

logger = structlog.get_logger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenefit", description="Model selection and layout fitting for object instances"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help="Overrides SCENEFIT_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register(subparsers)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(level=args.log_level)
    try:
        code: int = args.handler(args)
    except SceneFitError as e:
        logger.error("command_failed", command=args.command, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return code


if __name__ == "__main__":
    sys.exit(main())

import argparse
import logging
import sys
from typing import List, Optional

from config import LOG_LEVEL
from handlers import EXIT_ERROR, ablate, evaluate, report, sweep, train
from utils.errors import CdgLabError

# Configure logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdg-lab",
        description="Continual diffusion generation testbed: training, evaluation, sweeps, ablations, reports.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in (train, evaluate, sweep, ablate, report):
        module.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except CdgLabError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

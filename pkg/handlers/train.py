import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from config import METHODS, RunConfig, load_config, replace_section
from handlers import EXIT_COLLAPSE, EXIT_ERROR, EXIT_OK
from messages import CONFIG_ERROR, RUN_COLLAPSED, RUN_FAILED, TRAIN_FINISHED, TRAIN_STARTED
from utils.datasets import export_csv
from utils.errors import CollapseError, ConfigError
from utils.runner import build_stream, run_continual

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="run one continual training experiment")
    parser.add_argument("--config", required=True, help="JSON run config")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--method", choices=METHODS, default=None, help="override the config method")
    parser.add_argument("--export-stream", action="store_true", help="also write the task stream to stream.csv")
    parser.set_defaults(handler=handle)


def resolve_config(path: str, seed: Optional[int] = None, method: Optional[str] = None) -> RunConfig:
    config = load_config(path)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if method is not None:
        changes["method"] = method
    return replace_section(config, **changes) if changes else config


def report_config_error(error: ConfigError) -> int:
    logger.error(f"❌ {error}")
    print(CONFIG_ERROR.format(error=error), file=sys.stderr)
    return EXIT_ERROR


def handle(args: argparse.Namespace) -> int:
    try:
        config = resolve_config(args.config, args.seed, args.method)
    except ConfigError as e:
        return report_config_error(e)

    out = Path(args.out)
    print(TRAIN_STARTED.format(method=config.method, seed=config.seed, out=out))
    try:
        record = run_continual(config, out)
    except CollapseError as e:
        print(RUN_FAILED.format(reason=e), file=sys.stderr)
        return EXIT_COLLAPSE

    if args.export_stream:
        rows = export_csv(build_stream(config), out / "stream.csv")
        logger.info(f"Exported {rows} stream rows")
    if record.collapsed:
        print(RUN_COLLAPSED.format(reason=record.reason), file=sys.stderr)
        return EXIT_COLLAPSE
    print(TRAIN_FINISHED.format(mf=record.mf, imf=record.imf))
    return EXIT_OK

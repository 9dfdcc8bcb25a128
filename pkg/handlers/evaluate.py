import argparse
import csv
import logging
from pathlib import Path

from handlers import EXIT_OK
from handlers.train import report_config_error
from messages import EVAL_FINISHED
from utils.errors import ConfigError
from utils.runner import evaluate_checkpoint

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="recompute one fidelity row from a saved checkpoint")
    parser.add_argument("--run", required=True, help="run directory written by train")
    parser.add_argument("--task", type=int, required=True, help="checkpoint task index k")
    parser.add_argument("--out", required=True, help="output directory; the run directory is left untouched")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    try:
        row = evaluate_checkpoint(args.run, args.task)
    except ConfigError as e:
        return report_config_error(e)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"eval_task{args.task}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "i", "fd"])
        for i, fd in enumerate(row, start=1):
            writer.writerow([args.task, i, repr(float(fd))])
    print(EVAL_FINISHED.format(k=args.task, row=", ".join(f"{fd:.4f}" for fd in row), path=path))
    return EXIT_OK

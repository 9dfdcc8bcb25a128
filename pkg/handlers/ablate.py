import argparse
import asyncio
import csv
import logging
import sys
from pathlib import Path
from typing import List, Tuple

from config import RunConfig
from handlers import EXIT_COLLAPSE, EXIT_OK
from handlers.sweep import weighted_point
from handlers.train import report_config_error, resolve_config
from messages import ABLATION_FINISHED, POINTS_FAILED
from utils.errors import ConfigError
from utils.scheduler import run_points

logger = logging.getLogger(__name__)

# row name -> which of (ikc, ukc, lkc) keep their configured weight
ABLATION_ROWS: List[Tuple[str, Tuple[bool, bool, bool]]] = [
    ("base", (False, False, False)),
    ("ikc", (True, False, False)),
    ("ikc+ukc", (True, True, False)),
    ("ikc+lkc", (True, False, True)),
    ("ikc+ukc+lkc", (True, True, True)),
]


def register(subparsers) -> None:
    parser = subparsers.add_parser("ablate", help="remove consistency terms one at a time")
    parser.add_argument("--config", required=True, help="JSON run config; its weights are the full row")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.set_defaults(handler=handle)


def ablation_weights(config: RunConfig) -> List[Tuple[str, Tuple[float, float, float]]]:
    full = (config.weights.kappa, config.weights.lambda_, config.weights.eta)
    return [(name, tuple(w if keep else 0.0 for w, keep in zip(full, mask)))
            for name, mask in ABLATION_ROWS]


def handle(args: argparse.Namespace) -> int:
    try:
        config = resolve_config(args.config, args.seed, "ccd")
    except ConfigError as e:
        return report_config_error(e)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_weights(config)
    results = asyncio.run(run_points([weighted_point(config, name, out, w) for name, w in rows]))

    path = out / "ablation.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "MF", "IMF"])
        for (name, _), result in zip(rows, results):
            writer.writerow([name,
                             "" if result["MF"] is None else repr(result["MF"]),
                             "" if result["IMF"] is None else repr(result["IMF"])])
    print(ABLATION_FINISHED.format(path=path))
    failed = sum(1 for r in results if r["status"] != "ok")
    if failed:
        print(POINTS_FAILED.format(count=failed), file=sys.stderr)
        return EXIT_COLLAPSE
    return EXIT_OK

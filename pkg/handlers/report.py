import argparse
import asyncio
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

from config import DB_NAME, REPLAY_METHODS
from database import get_forgetting_curve, get_method_buffer_table, get_runs, init_db, record_fidelity, record_run
from handlers import EXIT_ERROR, EXIT_OK
from messages import (NO_RUNS, REPORT_BUFFER_HEADER, REPORT_BUFFER_ROW, REPORT_CURVE_HEADER, REPORT_FINISHED,
                      REPORT_FOOTER, REPORT_HEADER, REPORT_ROW, REPORT_SKIPPED, USAGE_ERROR)
from utils.errors import MetricError
from utils.metrics import FidelityMatrix, imf, mf

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("report", help="aggregate run directories into tables and plot data")
    parser.add_argument("--runs", required=True, help="directory searched recursively for run.json")
    parser.add_argument("--out", default=None, help="output directory (default: --runs)")
    parser.set_defaults(handler=handle)


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6g}"


def _csv_value(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


async def collect_runs(root: Path, db_path: str) -> int:
    """Load every usable run under ``root`` into the registry; returns how many were kept."""
    await init_db(db_path)
    kept = 0
    for run_json in sorted(root.rglob("run.json")):
        run_dir = run_json.parent
        run_id = run_dir.relative_to(root).as_posix() or "."
        matrix_path = run_dir / "fidelity_matrix.csv"
        if not matrix_path.exists():
            logger.warning(f"⚠️ {run_id}: no fidelity_matrix.csv")
            print(REPORT_SKIPPED.format(path=run_id, reason="missing fidelity_matrix.csv"), file=sys.stderr)
            continue
        try:
            summary = json.loads(run_json.read_text(encoding="utf-8"))
            config = summary["config"]
            num_tasks = int(config["dataset"]["num_tasks"])
            buffer = int(config["buffer_capacity"]) if config["method"] in REPLAY_METHODS else 0
            matrix = FidelityMatrix.read_csv(matrix_path, num_tasks)
        except (OSError, ValueError, KeyError, TypeError, MetricError) as e:
            print(REPORT_SKIPPED.format(path=run_id, reason=e), file=sys.stderr)
            continue
        complete = matrix.completed_rows == matrix.num_tasks
        await record_run(db_path, run_id, str(run_dir), summary.get("method", "?"), int(summary.get("seed", 0)),
                         summary.get("status", "ok"), num_tasks, buffer,
                         mf(matrix) if complete else None, imf(matrix) if complete else None)
        entries = [(k, i, matrix.get(k, i)) for k in range(1, num_tasks + 1) for i in range(1, k + 1)]
        await record_fidelity(db_path, run_id, [(k, i, fd) for k, i, fd in entries if math.isfinite(fd)])
        kept += 1
    return kept


async def render(db_path: str, root: Path, out: Path) -> int:
    runs = await get_runs(db_path)
    by_buffer = await get_method_buffer_table(db_path)
    curves: Dict[str, List] = {run[0]: await get_forgetting_curve(db_path, run[0]) for run in runs}

    with open(out / "report_metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "method", "seed", "MF", "IMF", "status"])
        for run_id, method, seed, status, _, run_mf, run_imf in runs:
            writer.writerow([run_id, method, seed, _csv_value(run_mf), _csv_value(run_imf), status])

    with open(out / "forgetting_curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "k", "fd_task1"])
        for run_id, curve in curves.items():
            for k, fd in curve:
                writer.writerow([run_id, k, repr(float(fd))])

    with open(out / "report_method_buffer.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "buffer", "runs", "MF", "IMF"])
        for method, buffer, count, mean_mf, mean_imf in by_buffer:
            writer.writerow([method, buffer, count, _csv_value(mean_mf), _csv_value(mean_imf)])

    text = REPORT_HEADER.format(count=len(runs), root=root.as_posix())
    for run_id, method, seed, status, _, run_mf, run_imf in runs:
        text += REPORT_ROW.format(run=run_id, method=method, seed=seed, status=status,
                                  mf=_fmt(run_mf), imf=_fmt(run_imf))
    width = max((num_tasks for _, _, _, _, num_tasks, _, _ in runs), default=0)
    text += REPORT_CURVE_HEADER.format(columns=" | ".join(f"k={k}" for k in range(1, width + 1)),
                                       separators="---|" * width)
    for run_id, curve in curves.items():
        values = dict(curve)
        cells = [_fmt(values.get(k)) for k in range(1, width + 1)]
        text += f"| {run_id} | " + " | ".join(cells) + " |\n"
    text += REPORT_BUFFER_HEADER
    for method, buffer, count, mean_mf, mean_imf in by_buffer:
        text += REPORT_BUFFER_ROW.format(method=method, buffer=buffer or "-", runs=count,
                                         mf=_fmt(mean_mf), imf=_fmt(mean_imf))
    text += REPORT_FOOTER
    (out / "report.md").write_text(text, encoding="utf-8")
    return len(runs)


async def build_report(root: Path, out: Path) -> int:
    db_path = out / DB_NAME
    if db_path.exists():
        db_path.unlink()
    kept = await collect_runs(root, str(db_path))
    if kept == 0:
        return 0
    return await render(str(db_path), root, out)


def handle(args: argparse.Namespace) -> int:
    root = Path(args.runs)
    out = Path(args.out) if args.out else root
    if not root.is_dir() or not any(root.rglob("run.json")):
        message = NO_RUNS.format(path=root)
        logger.error(f"❌ {message}")
        print(USAGE_ERROR.format(error=message), file=sys.stderr)
        return EXIT_ERROR

    out.mkdir(parents=True, exist_ok=True)
    count = asyncio.run(build_report(root, out))
    if count == 0:
        print(USAGE_ERROR.format(error="no usable runs (every run lacks a fidelity matrix)"), file=sys.stderr)
        return EXIT_ERROR
    print(REPORT_FINISHED.format(count=count, path=out / "report.md"))
    return EXIT_OK

import argparse
import asyncio
import csv
import itertools
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from config import DEFAULT_CCD_WEIGHT, METHODS, REPLAY_METHODS, RunConfig, config_from_dict, config_to_dict
from handlers import EXIT_COLLAPSE, EXIT_OK
from handlers.train import report_config_error, resolve_config
from messages import POINTS_FAILED, SWEEP_FINISHED, SWEEP_PLAN
from utils.errors import ConfigError
from utils.scheduler import RunPoint, run_points

logger = logging.getLogger(__name__)

AXES = ("kappa", "lambda", "eta")
BUFFER_AXIS = "buffer"
DEFAULT_GRID = "kappa=1e-7,1e-5,1e-3;lambda=1e-7,1e-5,1e-3;eta=1e-7,1e-5,1e-3"

Weights = Tuple[float, float, float]


@dataclass(frozen=True)
class SweepPoint:
    method: str
    buffer: int
    weights: Weights

    def name(self, n: int) -> str:
        kappa, lam, eta = self.weights
        return f"point{n:03d}_{self.method}_b{self.buffer}_k{kappa:g}_l{lam:g}_e{eta:g}"


def register(subparsers) -> None:
    parser = subparsers.add_parser("sweep", help="run over a grid of consistency weights and buffer sizes")
    parser.add_argument("--config", required=True, help="JSON run config")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--grid", default=DEFAULT_GRID,
                        help='e.g. "kappa=1e-7,1e-5;lambda=1e-5;eta=1e-5;buffer=512,2560,5120"')
    parser.add_argument("--mode", choices=("cartesian", "axes"), default="cartesian",
                        help="cartesian: full product of the weight lists; "
                             "axes: vary one weight at a time around 1e-5")
    parser.add_argument("--methods", default="ccd",
                        help=f"comma-separated methods to compare, from {', '.join(METHODS)}")
    parser.add_argument("--seed", type=int, default=None)
    parser.set_defaults(handler=handle)


def _parse_values(key: str, values: str) -> List[float]:
    try:
        parsed = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"grid axis '{key}' has a non-numeric value: {values}") from None
    if not parsed:
        raise ConfigError(f"grid axis '{key}' has no values")
    if any(not math.isfinite(v) or v <= 0 for v in parsed):
        raise ConfigError(f"grid axis '{key}' values must be positive reals: {values}")
    if key == BUFFER_AXIS:
        if any(v != int(v) for v in parsed):
            raise ConfigError(f"grid axis '{key}' values must be whole sample counts: {values}")
        parsed = [int(v) for v in parsed]
    return parsed


def parse_grid(text: str) -> Dict[str, List[float]]:
    grid: Dict[str, List[float]] = {}
    for part in (p.strip() for p in text.split(";")):
        if not part:
            continue
        key, sep, values = part.partition("=")
        key = key.strip()
        if not sep or key not in AXES + (BUFFER_AXIS,):
            raise ConfigError(f"bad grid axis '{part}' (expected one of {AXES + (BUFFER_AXIS,)} as name=v1,v2,...)")
        if key in grid:
            raise ConfigError(f"grid axis '{key}' given twice")
        grid[key] = _parse_values(key, values)
    if not grid:
        raise ConfigError("empty sweep grid")
    return grid


def parse_methods(text: str) -> List[str]:
    methods = list(dict.fromkeys(m.strip() for m in text.split(",") if m.strip()))
    unknown = [m for m in methods if m not in METHODS]
    if not methods or unknown:
        raise ConfigError(f"bad --methods '{text}' (expected a comma-separated subset of {METHODS})")
    return methods


def grid_points(grid: Dict[str, List[float]], mode: str = "cartesian") -> List[Weights]:
    """Weight triples of the grid; axes missing from the grid stay at 1e-5."""
    centre = (DEFAULT_CCD_WEIGHT,) * len(AXES)
    if mode == "cartesian":
        axes = [grid.get(axis, [DEFAULT_CCD_WEIGHT]) for axis in AXES]
        points = list(itertools.product(*axes))
    elif mode == "axes":
        points = [centre]
        for position, axis in enumerate(AXES):
            for value in grid.get(axis, []):
                point = list(centre)
                point[position] = value
                points.append(tuple(point))
    else:
        raise ConfigError(f"unknown sweep mode '{mode}'")
    return list(dict.fromkeys(points))


def plan_points(config: RunConfig, grid: Dict[str, List[float]], mode: str = "cartesian",
                methods: Sequence[str] = ("ccd",)) -> List[SweepPoint]:
    """Every (method, buffer, weights) run of the sweep.

    Weights only vary for ccd; methods without replay run once with no buffer.
    """
    weights = grid_points(grid, mode)
    buffers = grid.get(BUFFER_AXIS) or [config.buffer_capacity]
    fixed = (config.weights.kappa, config.weights.lambda_, config.weights.eta)
    points = []
    for method in methods:
        for buffer in (buffers if method in REPLAY_METHODS else [0]):
            for w in (weights if method == "ccd" else [fixed]):
                points.append(SweepPoint(method, int(buffer), tuple(w)))
    return points


def weighted_point(config: RunConfig, name: str, out_dir: Path, weights: Weights, method: str = "ccd",
                   buffer: Optional[int] = None) -> RunPoint:
    """A validated run point: ``config`` with method, weights and buffer capacity replaced."""
    data = config_to_dict(config)
    data["method"] = method
    data["weights"] = dict(zip(AXES, weights))
    if buffer is not None:
        data["buffer_capacity"] = buffer
    config_from_dict(data)
    return RunPoint(name=name, config=data, out_dir=str(out_dir / name))


def write_summary(path: Path, points: List[SweepPoint], results: List[Dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kappa", "lambda", "eta", "MF", "IMF", "method", "buffer", "status"])
        for point, result in zip(points, results):
            writer.writerow([repr(v) for v in point.weights] + [
                "" if result["MF"] is None else repr(result["MF"]),
                "" if result["IMF"] is None else repr(result["IMF"]),
                point.method, point.buffer, result["status"],
            ])


def handle(args: argparse.Namespace) -> int:
    try:
        config = resolve_config(args.config, args.seed)
        points = plan_points(config, parse_grid(args.grid), args.mode, parse_methods(args.methods))
        out = Path(args.out)
        run_list = [weighted_point(config, p.name(n), out, p.weights, p.method, p.buffer)
                    for n, p in enumerate(points)]
    except ConfigError as e:
        return report_config_error(e)

    out.mkdir(parents=True, exist_ok=True)
    print(SWEEP_PLAN.format(count=len(points), mode=args.mode))
    results = asyncio.run(run_points(run_list))

    path = out / "sweep_summary.csv"
    write_summary(path, points, results)
    print(SWEEP_FINISHED.format(path=path))
    failed = sum(1 for r in results if r["status"] != "ok")
    if failed:
        print(POINTS_FAILED.format(count=failed), file=sys.stderr)
        return EXIT_COLLAPSE
    return EXIT_OK

import asyncio
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import THREADS, config_from_dict
from utils.errors import CollapseError

logger = logging.getLogger(__name__)


@dataclass
class RunPoint:
    """One independent run of a sweep or ablation: a resolved config and its output dir."""

    name: str
    config: Dict[str, Any]
    out_dir: str


def run_point(point: RunPoint) -> Dict[str, Any]:
    """Run one point in the current process; collapse is reported, not raised."""
    from utils.runner import run_continual

    config = config_from_dict(point.config)
    try:
        record = run_continual(config, Path(point.out_dir))
    except CollapseError as e:
        return {"name": point.name, "status": "failed", "reason": str(e), "MF": None, "IMF": None}
    return {"name": point.name, "status": record.status, "reason": record.reason,
            "MF": record.mf, "IMF": record.imf}


async def run_points(points: List[RunPoint], workers: Optional[int] = None) -> List[Dict[str, Any]]:
    """Run every point, in parallel child processes when more than one worker is allowed.

    Results come back in the order of ``points``.
    """
    workers = max(1, min(workers or THREADS, len(points)))
    if workers == 1:
        results = []
        for point in points:
            print(f"🚀 {point.name}")
            results.append(run_point(point))
        return results

    loop = asyncio.get_running_loop()
    print(f"⏰ Running {len(points)} points on {workers} worker processes")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [loop.run_in_executor(pool, run_point, point) for point in points]
        results = await asyncio.gather(*futures)
    logger.info(f"Finished {len(results)} points")
    return list(results)

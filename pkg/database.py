import logging
from typing import Any, Iterable, List, Optional, Tuple

import aiosqlite

logger = logging.getLogger(__name__)


async def init_db(db_path: str) -> None:
    """Create the run registry tables used by the report command."""
    async with aiosqlite.connect(db_path) as db:
        await db.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                path TEXT NOT NULL,
                method TEXT NOT NULL,
                seed INTEGER NOT NULL,
                status TEXT NOT NULL,
                num_tasks INTEGER NOT NULL,
                buffer INTEGER NOT NULL,
                mf REAL,
                imf REAL
            )
        """)
        await db.execute("""
            CREATE TABLE IF NOT EXISTS fidelity (
                run_id TEXT NOT NULL,
                k INTEGER NOT NULL,
                i INTEGER NOT NULL,
                fd REAL NOT NULL,
                PRIMARY KEY (run_id, k, i),
                FOREIGN KEY (run_id) REFERENCES runs (run_id)
            )
        """)
        await db.commit()
    logger.debug(f"Run registry ready at {db_path}")


async def record_run(db_path: str, run_id: str, path: str, method: str, seed: int, status: str,
                     num_tasks: int, buffer: int, mf: Optional[float], imf: Optional[float]) -> None:
    async with aiosqlite.connect(db_path) as db:
        await db.execute("""
            INSERT OR REPLACE INTO runs (run_id, path, method, seed, status, num_tasks, buffer, mf, imf)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
        """, (run_id, path, method, seed, status, num_tasks, buffer, mf, imf))
        await db.commit()


async def record_fidelity(db_path: str, run_id: str, entries: Iterable[Tuple[int, int, float]]) -> None:
    async with aiosqlite.connect(db_path) as db:
        await db.executemany(
            "INSERT OR REPLACE INTO fidelity (run_id, k, i, fd) VALUES (?, ?, ?, ?)",
            [(run_id, k, i, fd) for k, i, fd in entries],
        )
        await db.commit()


async def get_runs(db_path: str) -> List[Tuple[Any, ...]]:
    """(run_id, method, seed, status, num_tasks, mf, imf) ordered by run id."""
    async with aiosqlite.connect(db_path) as db:
        cursor = await db.execute("""
            SELECT run_id, method, seed, status, num_tasks, mf, imf
            FROM runs ORDER BY run_id
        """)
        return list(await cursor.fetchall())


async def get_forgetting_curve(db_path: str, run_id: str) -> List[Tuple[int, float]]:
    """Fidelity of the first task after each task k: [(k, d[k, 1]), ...]."""
    async with aiosqlite.connect(db_path) as db:
        cursor = await db.execute("""
            SELECT k, fd FROM fidelity WHERE run_id = ? AND i = 1 ORDER BY k
        """, (run_id,))
        return list(await cursor.fetchall())


async def get_method_buffer_table(db_path: str) -> List[Tuple[Any, ...]]:
    """(method, buffer, runs, mean MF, mean IMF) over complete runs, one row per method and buffer size."""
    async with aiosqlite.connect(db_path) as db:
        cursor = await db.execute("""
            SELECT method, buffer, COUNT(*), AVG(mf), AVG(imf)
            FROM runs WHERE mf IS NOT NULL
            GROUP BY method, buffer ORDER BY method, buffer
        """)
        return list(await cursor.fetchall())

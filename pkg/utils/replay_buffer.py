"""
Class-balanced reservoir memory of real samples from finished tasks.

The budget is split evenly over every class seen so far (remainder slots go
to classes in a seeded order, classes with too few samples hand their unused
slots to the rest). Classes of older tasks shrink to a prefix of what they
hold; classes of the finished task are reservoir-sampled from its data.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from utils.errors import ReplayBufferError

logger = logging.getLogger(__name__)

ReplayBatch = Tuple[np.ndarray, np.ndarray, np.ndarray]


class ReplayBuffer:
    def __init__(self, capacity: int, seed: int = 0):
        if int(capacity) != capacity or capacity < 1:
            raise ReplayBufferError(f"buffer capacity must be a positive integer, got {capacity}")
        self.capacity = int(capacity)
        self.seed = seed
        self._rng = np.random.default_rng([seed, 0xB0F])
        self._x: Dict[int, np.ndarray] = {}
        self._task: Dict[int, np.ndarray] = {}
        self.tasks_seen: List[int] = []

    def __len__(self) -> int:
        return sum(len(v) for v in self._task.values())

    @property
    def size(self) -> int:
        return len(self)

    @property
    def classes(self) -> List[int]:
        return sorted(self._x)

    def class_counts(self) -> Dict[int, int]:
        return {c: len(self._task[c]) for c in self.classes}

    def _check_capacity(self, where: str) -> None:
        if len(self) > self.capacity:
            raise ReplayBufferError(f"capacity {self.capacity} exceeded ({len(self)}) during {where}")

    def _quotas(self, available: Dict[int, int]) -> Dict[int, int]:
        order = [int(c) for c in self._rng.permutation(sorted(available))]
        quota = {c: 0 for c in order}
        remaining = self.capacity
        open_classes = [c for c in order if available[c] > 0]
        while remaining > 0 and open_classes:
            share, extra = divmod(remaining, len(open_classes))
            if share == 0:
                for c in open_classes[:extra]:
                    quota[c] += 1
                break
            for c in open_classes:
                take = min(share, available[c] - quota[c])
                quota[c] += take
                remaining -= take
            open_classes = [c for c in open_classes if quota[c] < available[c]]
        return quota

    def _reservoir(self, n: int, k: int) -> np.ndarray:
        """Indices of a size-min(n, k) reservoir over a stream of length n."""
        kept = list(range(min(n, k)))
        for i in range(k, n):
            j = int(self._rng.integers(0, i + 1))
            if j < k:
                kept[j] = i
        return np.asarray(kept, dtype=np.int64)

    def update_after_task(self, x, y, task_id: int) -> "ReplayBuffer":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ReplayBufferError(f"expected (n, d) samples with n labels, got {x.shape} and {y.shape}")
        if self._x and x.shape[1] != next(iter(self._x.values())).shape[1]:
            raise ReplayBufferError("sample dimension differs from stored samples")

        incoming = {int(c): np.flatnonzero(y == c) for c in np.unique(y)}
        available = {c: len(self._task[c]) for c in self._x}
        for c, idx in incoming.items():
            available[c] = available.get(c, 0) + len(idx)
        quota = self._quotas(available)

        for c in self.classes:
            if c not in incoming:
                self._x[c] = self._x[c][:quota[c]]
                self._task[c] = self._task[c][:quota[c]]
        self._check_capacity("shrink")

        for c in sorted(incoming):
            old_x = self._x.pop(c, np.empty((0, x.shape[1])))
            old_task = self._task.pop(c, np.empty(0, dtype=np.int64))
            stream_x = np.concatenate([old_x, x[incoming[c]]])
            stream_task = np.concatenate([old_task, np.full(len(incoming[c]), task_id, dtype=np.int64)])
            keep = self._reservoir(len(stream_x), quota[c])
            self._x[c] = stream_x[keep].copy()
            self._task[c] = stream_task[keep].copy()
            self._check_capacity(f"insert of class {c}")

        for c in [c for c in self.classes if len(self._task[c]) == 0]:
            del self._x[c], self._task[c]
        self.tasks_seen.append(task_id)
        logger.info(f"Buffer after task {task_id}: {len(self)}/{self.capacity} samples, counts {self.class_counts()}")
        return self

    def entries(self) -> ReplayBatch:
        """(x, y, task) for every stored sample, classes in ascending order."""
        if not self._x:
            raise ReplayBufferError("replay buffer is empty")
        xs = [self._x[c] for c in self.classes]
        ys = [np.full(len(self._task[c]), c, dtype=np.int64) for c in self.classes]
        ts = [self._task[c] for c in self.classes]
        return np.concatenate(xs), np.concatenate(ys), np.concatenate(ts)

    def sample_pairs(self, current_batch, rng: np.random.Generator) -> ReplayBatch:
        """Uniform draw with replacement, one stored sample per element of ``current_batch``."""
        n = current_batch if isinstance(current_batch, (int, np.integer)) else len(current_batch)
        if len(self) == 0:
            raise ReplayBufferError("cannot sample replay pairs from an empty buffer")
        x, y, task = self.entries()
        idx = rng.integers(0, len(y), size=n)
        return x[idx], y[idx], task[idx]

    def to_dict(self) -> dict:
        data = {"capacity": self.capacity, "seed": self.seed, "tasks_seen": list(self.tasks_seen),
                "counts": {str(c): n for c, n in self.class_counts().items()}, "entries": []}
        if len(self):
            x, y, task = self.entries()
            data["entries"] = [{"x": row.tolist(), "y": int(label), "task": int(t)}
                               for row, label, t in zip(x, y, task)]
        return data

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")


def new_buffer(capacity: int, seed: int = 0) -> ReplayBuffer:
    return ReplayBuffer(capacity, seed)


def update_after_task(buffer: ReplayBuffer, task_dataset, task_id: int) -> ReplayBuffer:
    x, y = task_dataset
    return buffer.update_after_task(x, y, task_id)


def sample_pairs(buffer: ReplayBuffer, current_batch, rng: np.random.Generator) -> ReplayBatch:
    return buffer.sample_pairs(current_batch, rng)

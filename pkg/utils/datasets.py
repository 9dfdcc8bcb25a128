"""
Procedural class-incremental task streams.

mixture2d  one anisotropic 2-D Gaussian per class, means evenly spaced on a ring
rings      one noisy ring arc per class, alternating between two radii
glyphs8    one seeded 8x8 binary glyph per class with pixel flips, flattened to 64-D

Every stream is shifted and scaled with its analytic moments so the data is
roughly zero-mean and unit-scale. Generation is a pure function of
(stream seed, task, split).
"""

import csv
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from config import DATASET_KINDS
from utils.errors import DatasetError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")

RING_RADIUS = 3.0
RADIAL_STD = 0.35
TANGENTIAL_STD = 0.12
ARC_RADII = (2.0, 3.5)
ARC_NOISE = 0.08
GLYPH_SIDE = 8
GLYPH_FLIP = 0.05

LabeledBatch = Tuple[np.ndarray, np.ndarray]


class MixtureLayout:
    input_dim = 2

    def __init__(self, num_labels: int):
        self.angles = 2.0 * np.pi * np.arange(num_labels) / num_labels
        self.means = RING_RADIUS * np.stack([np.cos(self.angles), np.sin(self.angles)], axis=1)
        self.shift = self.means.mean(axis=0)
        spread = np.mean(np.sum((self.means - self.shift) ** 2, axis=1)) + RADIAL_STD ** 2 + TANGENTIAL_STD ** 2
        self.scale = float(np.sqrt(spread / 2.0))

    def draw(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((labels.size, 2)) * np.array([RADIAL_STD, TANGENTIAL_STD])
        cos, sin = np.cos(self.angles[labels]), np.sin(self.angles[labels])
        rotated = np.stack([cos * z[:, 0] - sin * z[:, 1], sin * z[:, 0] + cos * z[:, 1]], axis=1)
        return self.means[labels] + rotated


class RingLayout:
    input_dim = 2

    def __init__(self, num_labels: int):
        self.angles = 2.0 * np.pi * np.arange(num_labels) / num_labels
        self.radii = np.array([ARC_RADII[c % 2] for c in range(num_labels)])
        self.half_width = min(np.pi, 2.0 * np.pi / num_labels)
        sinc = np.sin(self.half_width) / self.half_width
        centroids = (self.radii * sinc)[:, None] * np.stack([np.cos(self.angles), np.sin(self.angles)], axis=1)
        self.shift = centroids.mean(axis=0)
        second = np.mean(self.radii ** 2) + ARC_NOISE ** 2
        self.scale = float(np.sqrt((second - self.shift @ self.shift) / 2.0))

    def draw(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        phi = self.angles[labels] + rng.uniform(-self.half_width, self.half_width, size=labels.size)
        rho = self.radii[labels] + ARC_NOISE * rng.standard_normal(labels.size)
        return np.stack([rho * np.cos(phi), rho * np.sin(phi)], axis=1)


class GlyphLayout:
    input_dim = GLYPH_SIDE * GLYPH_SIDE

    def __init__(self, num_labels: int, seed: int):
        self.prototypes = np.stack([
            np.where(np.random.default_rng([seed, 0x6C, c]).random(self.input_dim) < 0.5, -1.0, 1.0)
            for c in range(num_labels)
        ])
        self.shift = self.prototypes.mean(axis=0) * (1.0 - 2.0 * GLYPH_FLIP)
        self.scale = float(np.sqrt(1.0 - np.mean(self.shift ** 2)))

    def draw(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        flips = rng.random((labels.size, self.input_dim)) < GLYPH_FLIP
        return np.where(flips, -1.0, 1.0) * self.prototypes[labels]


@dataclass(frozen=True, eq=False)
class TaskSpec:
    task_id: int
    labels: Tuple[int, ...]
    n_train: int
    n_test: int
    stream_seed: int
    layout: object

    @property
    def input_dim(self) -> int:
        return self.layout.input_dim

    def count(self, split: str) -> int:
        return self.n_train if split == "train" else self.n_test


@dataclass(frozen=True, eq=False)
class TaskStream:
    kind: str
    seed: int
    tasks: Tuple[TaskSpec, ...]
    num_labels: int

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def input_dim(self) -> int:
        return self.tasks[0].input_dim

    def task(self, k: int) -> TaskSpec:
        return self.tasks[k - 1]

    def class_means(self) -> np.ndarray:
        """Normalized per-class means (mixture2d only)."""
        layout = self.tasks[0].layout
        if not isinstance(layout, MixtureLayout):
            raise DatasetError(f"class means are only defined for mixture2d, not {self.kind}")
        return (layout.means - layout.shift) / layout.scale


def make_stream(kind: str, K: int, classes_per_task: int, seed: int,
                samples_per_task: int = 5000, test_fraction: float = 0.2) -> TaskStream:
    if kind not in DATASET_KINDS:
        raise DatasetError(f"unknown dataset kind '{kind}' (expected one of {DATASET_KINDS})")
    if K < 1 or classes_per_task < 1:
        raise DatasetError(f"need K >= 1 and classes_per_task >= 1, got K={K}, classes_per_task={classes_per_task}")
    n_test = int(round(samples_per_task * test_fraction))
    n_train = samples_per_task - n_test
    if n_train < 1 or n_test < 1:
        raise DatasetError(f"samples_per_task={samples_per_task} leaves an empty split")

    num_labels = K * classes_per_task
    if kind == "mixture2d":
        layout = MixtureLayout(num_labels)
    elif kind == "rings":
        layout = RingLayout(num_labels)
    else:
        layout = GlyphLayout(num_labels, seed)

    tasks = tuple(
        TaskSpec(task_id=k + 1, labels=tuple(range(k * classes_per_task, (k + 1) * classes_per_task)),
                 n_train=n_train, n_test=n_test, stream_seed=seed, layout=layout)
        for k in range(K)
    )
    logger.debug(f"Built {kind} stream: K={K}, {classes_per_task} classes/task, d={layout.input_dim}")
    return TaskStream(kind=kind, seed=seed, tasks=tasks, num_labels=num_labels)


def sample_task(spec: TaskSpec, split: str, n: int, rng: np.random.Generator) -> LabeledBatch:
    """n i.i.d. labeled draws from the task distribution (labels uniform over the task's classes).

    Each split draws from its own child stream of ``rng``: one rng state gives different train and test draws.
    """
    if split not in SPLITS:
        raise DatasetError(f"unknown split '{split}' (expected one of {SPLITS})")
    if n < 1:
        raise DatasetError(f"need n >= 1, got {n}")
    split_rng = np.random.default_rng([int(rng.integers(2 ** 63)), spec.task_id, SPLITS.index(split)])
    labels = split_rng.choice(np.asarray(spec.labels, dtype=np.int64), size=n)
    x = (spec.layout.draw(labels, split_rng) - spec.layout.shift) / spec.layout.scale
    return x, labels


def task_data(spec: TaskSpec, split: str) -> LabeledBatch:
    """The task's fixed train or test set."""
    rng = np.random.default_rng([spec.stream_seed, spec.task_id])
    return sample_task(spec, split, spec.count(split), rng)


def class_balanced_draw(spec: TaskSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Labels for n samples spread as evenly as possible over the task's classes."""
    labels = np.asarray(spec.labels, dtype=np.int64)
    return np.sort(np.resize(labels, n)) if n >= labels.size else rng.choice(labels, size=n, replace=False)


def dataset_hash(x: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<i8").tobytes())
    return h.hexdigest()


def export_csv(stream: TaskStream, path: Union[str, Path]) -> int:
    """Write every task's train and test split as ``x0..,label,task,split`` rows."""
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{j}" for j in range(stream.input_dim)] + ["label", "task", "split"])
        for spec in stream.tasks:
            for split in SPLITS:
                x, y = task_data(spec, split)
                for row, label in zip(x, y):
                    writer.writerow([repr(float(v)) for v in row] + [int(label), spec.task_id, split])
                    rows += 1
    return rows

"""
Generative fidelity: a frozen feature embedding, Gaussian moment fits, the
closed-form Frechet distance between them, the per-run fidelity matrix and
its two summaries (final-row mean and running-row mean).
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from utils.errors import MetricError

logger = logging.getLogger(__name__)

EMBED_MODES = ("random", "identity")


@dataclass(frozen=True, eq=False)
class FeatureEmbedding:
    """features = tanh(x W + b), or the raw coordinates in identity mode."""

    input_dim: int
    mode: str = "random"
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    @property
    def feature_dim(self) -> int:
        return self.input_dim if self.mode == "identity" else self.weight.shape[1]

    def __call__(self, samples) -> np.ndarray:
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[1] != self.input_dim:
            raise MetricError(f"embedding expects (n, {self.input_dim}) samples, got {samples.shape}")
        if self.mode == "identity":
            return samples.copy()
        return np.tanh(samples @ self.weight + self.bias)


def make_embedding(input_dim: int, embed_seed: int, feature_dim: int = 16,
                   mode: str = "random") -> FeatureEmbedding:
    if mode not in EMBED_MODES:
        raise MetricError(f"unknown embedding mode '{mode}' (expected one of {EMBED_MODES})")
    if mode == "identity":
        return FeatureEmbedding(input_dim, "identity")
    rng = np.random.default_rng(embed_seed)
    weight = rng.standard_normal((input_dim, feature_dim)) / np.sqrt(input_dim)
    bias = rng.standard_normal(feature_dim)
    return FeatureEmbedding(input_dim, "random", weight, bias)


def feature_embed(samples, embed_seed: int, feature_dim: int = 16, mode: str = "random") -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    return make_embedding(samples.shape[-1], embed_seed, feature_dim, mode)(samples)


@dataclass(frozen=True, eq=False)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(features) -> GaussianStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    n = features.shape[0]
    if n < 2:
        raise MetricError(f"need at least 2 samples to fit a Gaussian, got {n}")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / n
    return GaussianStats(mean, 0.5 * (cov + cov.T), n)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh(0.5 * (matrix + matrix.T))
    return (vectors * np.sqrt(np.maximum(values, 0.0))) @ vectors.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.dim != b.dim:
        raise MetricError(f"Gaussian dimensions differ: {a.dim} vs {b.dim}")
    # tr (S_a S_b)^(1/2) = tr (A S_b A)^(1/2) with A = S_a^(1/2), which is symmetric PSD
    root_a = _psd_sqrt(a.cov)
    middle = root_a @ b.cov @ root_a
    values = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    trace_root = float(np.sum(np.sqrt(np.maximum(values, 0.0))))
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_root)
    return max(fd, 0.0)


class FidelityMatrix:
    """K x K lower-triangular fidelity entries d[k, i] for i <= k (1-based in the API)."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise MetricError(f"fidelity matrix needs at least one task, got {num_tasks}")
        self.num_tasks = num_tasks
        self.values = np.full((num_tasks, num_tasks), np.nan)

    def set(self, k: int, i: int, fd: float) -> None:
        if not (1 <= i <= k <= self.num_tasks):
            raise MetricError(f"entry ({k}, {i}) outside the lower triangle of a {self.num_tasks}-task matrix")
        if not np.isfinite(fd) or fd < 0:
            raise MetricError(f"fidelity entry ({k}, {i}) must be finite and >= 0, got {fd}")
        self.values[k - 1, i - 1] = fd

    def get(self, k: int, i: int) -> float:
        return float(self.values[k - 1, i - 1])

    def row(self, k: int) -> np.ndarray:
        return self.values[k - 1, :k].copy()

    def row_complete(self, k: int) -> bool:
        return bool(np.all(np.isfinite(self.row(k))))

    @property
    def completed_rows(self) -> int:
        return sum(1 for k in range(1, self.num_tasks + 1) if self.row_complete(k))

    def rows(self) -> List[List[float]]:
        return [self.row(k).tolist() for k in range(1, self.num_tasks + 1)]

    @classmethod
    def from_rows(cls, rows: List[List[float]]) -> "FidelityMatrix":
        matrix = cls(len(rows))
        for k, row in enumerate(rows, start=1):
            if len(row) != k:
                raise MetricError(f"row {k} has {len(row)} entries, expected {k}")
            for i, fd in enumerate(row, start=1):
                matrix.set(k, i, fd)
        return matrix

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["k", "i", "fd"])
            for k in range(1, self.num_tasks + 1):
                for i in range(1, k + 1):
                    fd = self.values[k - 1, i - 1]
                    if np.isfinite(fd):
                        writer.writerow([k, i, repr(float(fd))])

    @classmethod
    def read_csv(cls, path: Union[str, Path], num_tasks: Optional[int] = None) -> "FidelityMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [(int(r["k"]), int(r["i"]), float(r["fd"])) for r in csv.DictReader(fh)]
        if not rows and num_tasks is None:
            raise MetricError(f"{path}: no fidelity entries")
        matrix = cls(num_tasks or max(k for k, _, _ in rows))
        for k, i, fd in rows:
            matrix.set(k, i, fd)
        return matrix


def mf(matrix: FidelityMatrix) -> float:
    """Mean of the final row."""
    final = matrix.row(matrix.num_tasks)
    if not np.all(np.isfinite(final)):
        raise MetricError("final row of the fidelity matrix is incomplete")
    return float(np.mean(final))


def imf(matrix: FidelityMatrix) -> float:
    """Mean over tasks k of the mean of row k."""
    row_means = []
    for k in range(1, matrix.num_tasks + 1):
        row = matrix.row(k)
        if not np.all(np.isfinite(row)):
            raise MetricError(f"fidelity matrix row {k} is incomplete")
        row_means.append(np.mean(row))
    return float(np.mean(row_means))

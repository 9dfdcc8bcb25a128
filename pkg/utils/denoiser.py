"""
Conditional noise-prediction network eps_theta(x, t, y) with a label-regressor
head on the penultimate features, frozen teacher snapshots and checkpoints.

Architecture: input affine -> ``depth`` residual blocks (each adds a projected
sinusoidal time embedding and the label embedding) -> SiLU -> output affine.
Label index ``num_labels`` is the null token used for unconditional
evaluation.
"""

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from utils import autodiff as ad
from utils.errors import CheckpointError, ModelError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CDGCKPT1"
HEAD_PARAMS = ("head.W", "head.b")

Params = Dict[str, ad.Tensor]


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int
    num_labels: int
    hidden: int = 64
    depth: int = 3
    time_dim: int = 32

    @property
    def vocab(self) -> int:
        return self.num_labels + 1


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.size, 1))], axis=1)
    return emb


def _parameter_shapes(arch: ArchConfig) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) in canonical order."""
    d, h = arch.input_dim, arch.hidden
    shapes = [
        ("in.W", (d, h), d),
        ("in.b", (h,), d),
        ("time.W", (arch.time_dim, h), arch.time_dim),
        ("time.b", (h,), arch.time_dim),
        ("label.E", (arch.vocab, h), 1),
    ]
    for i in range(arch.depth):
        shapes += [
            (f"block{i}.time.W", (h, h), h),
            (f"block{i}.W1", (h, h), h),
            (f"block{i}.b1", (h,), h),
            (f"block{i}.W2", (h, h), h),
            (f"block{i}.b2", (h,), h),
        ]
    shapes += [
        ("out.W", (h, d), h),
        ("out.b", (d,), h),
        ("head.W", (h, arch.num_labels), h),
        ("head.b", (arch.num_labels,), h),
    ]
    return shapes


def _init_arrays(arch: ArchConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    arrays = {}
    for name, shape, fan_in in _parameter_shapes(arch):
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return arrays


class Denoiser:
    def __init__(self, arch: ArchConfig, params: Dict[str, np.ndarray], seed: int = 0):
        self.arch = arch
        self.params = params
        self.seed = seed

    @property
    def input_dim(self) -> int:
        return self.arch.input_dim

    @property
    def num_labels(self) -> int:
        return self.arch.num_labels

    @property
    def null_label(self) -> int:
        return self.arch.num_labels

    @property
    def names(self) -> List[str]:
        return [name for name, _, _ in _parameter_shapes(self.arch)]

    @property
    def trunk_names(self) -> List[str]:
        return [name for name in self.names if name not in HEAD_PARAMS]

    def tensors(self, requires_grad: bool = True) -> Params:
        return {name: ad.Tensor(self.params[name], requires_grad=requires_grad) for name in self.names}

    def _resolve(self, params: Optional[Params]) -> Params:
        return params if params is not None else self.tensors(requires_grad=False)

    def _check_labels(self, labels: np.ndarray) -> None:
        if labels.size and (labels.min() < 0 or labels.max() > self.null_label):
            raise ModelError(f"label out of range [0, {self.null_label}]: min={labels.min()}, max={labels.max()}")

    def features(self, x, t, labels, params: Optional[Params] = None) -> ad.Tensor:
        """Penultimate features of the trunk."""
        p = self._resolve(params)
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ModelError(f"expected input of shape (batch, {self.input_dim}), got {x.shape}")
        n = x.shape[0]
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
        self._check_labels(labels)
        t_emb = sinusoidal_embedding(np.broadcast_to(np.asarray(t), (n,)), self.arch.time_dim)

        h = ad.affine(x, p["in.W"], p["in.b"])
        temb = ad.silu(ad.affine(t_emb, p["time.W"], p["time.b"]))
        lemb = ad.gather(p["label.E"], labels)
        for i in range(self.arch.depth):
            z = ad.silu(h + ad.matmul(temb, p[f"block{i}.time.W"]) + lemb)
            z = ad.silu(ad.affine(z, p[f"block{i}.W1"], p[f"block{i}.b1"]))
            h = h + ad.affine(z, p[f"block{i}.W2"], p[f"block{i}.b2"])
        return ad.silu(h)

    def predict_noise(self, x_t, t, labels, params: Optional[Params] = None) -> ad.Tensor:
        p = self._resolve(params)
        return ad.affine(self.features(x_t, t, labels, p), p["out.W"], p["out.b"])

    def head_logits(self, features: ad.Tensor, params: Optional[Params] = None) -> ad.Tensor:
        # stop-gradient: the regressor never trains the trunk
        p = self._resolve(params)
        return ad.affine(ad.stop_gradient(features), p["head.W"], p["head.b"])

    def clean_features(self, x0, params: Optional[Params] = None) -> ad.Tensor:
        """Trunk features in the near-clean regime (t=1, null label)."""
        return self.features(x0, 1, self.null_label, params)

    def label_log_probs(self, x0, params: Optional[Params] = None) -> ad.Tensor:
        p = self._resolve(params)
        return ad.log_softmax(self.head_logits(self.clean_features(x0, p), p), axis=-1)

    def label_logits(self, x0) -> np.ndarray:
        """Class probabilities h_phi(y | x0) over the real labels."""
        with ad.no_grad():
            logits = self.head_logits(self.clean_features(np.asarray(x0, dtype=np.float64)))
            return ad.softmax(logits, axis=-1).data

    def reinit_head(self, rng: np.random.Generator) -> None:
        fresh = _init_arrays(self.arch, rng)
        for name in HEAD_PARAMS:
            self.params[name] = fresh[name]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[name].ravel() for name in self.names])

    def digest(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()

    def copy(self) -> "Denoiser":
        return Denoiser(self.arch, {k: v.copy() for k, v in self.params.items()}, self.seed)


class TeacherSnapshot:
    """Read-only copy of the model at the end of the previous task."""

    def __init__(self, model: Denoiser):
        frozen = model.copy()
        for value in frozen.params.values():
            value.setflags(write=False)
        self._model = frozen
        self._tensors = frozen.tensors(requires_grad=False)
        self.hash = frozen.digest()

    @property
    def model(self) -> Denoiser:
        return self._model

    @property
    def input_dim(self) -> int:
        return self._model.input_dim

    @property
    def null_label(self) -> int:
        return self._model.null_label

    def predict_noise(self, x_t, t, labels, params=None) -> ad.Tensor:
        return self._model.predict_noise(x_t, t, labels, self._tensors)

    def label_log_probs(self, x0, params=None) -> ad.Tensor:
        return self._model.label_log_probs(x0, self._tensors)

    def label_logits(self, x0) -> np.ndarray:
        return self._model.label_logits(x0)

    def digest(self) -> str:
        return self._model.digest()


def init_denoiser(arch: ArchConfig, seed: int) -> Denoiser:
    if arch.hidden < 1:
        raise ModelError(f"hidden width must be positive, got {arch.hidden}")
    if arch.input_dim < 1 or arch.num_labels < 1 or arch.depth < 1 or arch.time_dim < 1:
        raise ModelError(f"invalid architecture {arch}")
    rng = np.random.default_rng(seed)
    return Denoiser(arch, _init_arrays(arch, rng), seed)


def predict_noise(model, x_t, t, label, params=None) -> ad.Tensor:
    return model.predict_noise(x_t, t, label, params)


def label_logits(model, x0) -> np.ndarray:
    return model.label_logits(x0)


def freeze_snapshot(model: Denoiser) -> TeacherSnapshot:
    return TeacherSnapshot(model)


def save(model: Denoiser, path: Union[str, Path], task_index: Optional[int] = None) -> None:
    """Write ``magic | u64 header length | JSON header | little-endian float64 blob``."""
    header = {
        "arch": asdict(model.arch),
        "seed": model.seed,
        "task": task_index,
        "params": [[name, list(model.params[name].shape)] for name in model.names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = model.flat().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)
    logger.debug(f"Saved checkpoint {path} ({len(blob)} parameter bytes)")


def _read_header(raw: bytes, path) -> Tuple[dict, int]:
    """Parsed JSON header and the offset of the parameter blob."""
    prefix = len(CHECKPOINT_MAGIC) + 8
    if len(raw) < prefix or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<Q", raw[len(CHECKPOINT_MAGIC):prefix])
    try:
        header = json.loads(raw[prefix:prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: corrupt header")
    return header, prefix + header_len


def load(path: Union[str, Path]) -> Denoiser:
    raw = Path(path).read_bytes()
    header, blob_start = _read_header(raw, path)
    try:
        arch = ArchConfig(**header["arch"])
        layout = [(name, tuple(shape)) for name, shape in header["params"]]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None

    blob = raw[blob_start:]
    expected = sum(int(np.prod(shape)) for _, shape in layout)
    if len(blob) != expected * 8:
        raise CheckpointError(f"{path}: expected {expected * 8} parameter bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f8").astype(np.float64)

    params, offset = {}, 0
    for name, shape in layout:
        size = int(np.prod(shape))
        params[name] = values[offset:offset + size].reshape(shape).copy()
        offset += size
    model = Denoiser(arch, params, header.get("seed", 0))
    if sorted(model.names) != sorted(params):
        raise CheckpointError(f"{path}: parameter layout does not match architecture")
    return model


def checkpoint_task_index(path: Union[str, Path]) -> Optional[int]:
    """Task after which the checkpoint was written (None if not recorded)."""
    header, _ = _read_header(Path(path).read_bytes(), path)
    return header.get("task")

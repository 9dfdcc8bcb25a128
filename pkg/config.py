import json
import math
import os
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

from utils.errors import ConfigError

# Process configuration
THREADS = max(1, int(os.getenv("CDG_LAB_THREADS", "1")))
LOG_LEVEL = os.getenv("CDG_LAB_LOG_LEVEL", "INFO").upper()
DB_NAME = os.getenv("CDG_LAB_DB_NAME", "runs.db")

# Run config schema
CONFIG_SCHEMA_VERSION = 1
METHODS = ("naive", "er", "l2", "ewc", "agem", "ccd")
REPLAY_METHODS = ("er", "agem", "ccd")
DATASET_KINDS = ("mixture2d", "rings", "glyphs8")
SCHEDULE_KINDS = ("linear", "cosine")

# Diffusion defaults (DDPM's 1e-4..2e-2 range rescaled by 1000/T)
DEFAULT_T = 200
DEFAULT_BETA_MIN = 5e-4
DEFAULT_BETA_MAX = 0.1

# Training defaults
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_BATCH_SIZE = 64
DEFAULT_STEPS_PER_TASK = 2000
DEFAULT_BUFFER_CAPACITY = 512
DEFAULT_LABEL_DROPOUT = 0.1

# Consistency loss defaults
DEFAULT_CCD_WEIGHT = 1e-5
DEFAULT_DAMPING = 1e-3
UKC_WEIGHT_MAX = 100.0
LKC_WEIGHT_MAX = 50.0
FULL_PRECONDITIONER_MAX_DIM = 64

# Baseline defaults
DEFAULT_EWC_STRENGTH = 1.0
DEFAULT_L2_STRENGTH = 1e-2

# Evaluation defaults
DEFAULT_N_EVAL = 2048
DEFAULT_EMBED_SEED = 1234
DEFAULT_FEATURE_DIM = 16


def _section(cls):
    return field(default_factory=cls, metadata={"section": cls})


@dataclass
class DatasetConfig:
    kind: str = "mixture2d"
    num_tasks: int = 5
    classes_per_task: int = 2
    samples_per_task: int = 5000
    test_fraction: float = 0.2
    seed: Optional[int] = None  # None: use the run seed


@dataclass
class ScheduleConfig:
    T: int = DEFAULT_T
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX
    kind: str = "linear"


@dataclass
class ModelConfig:
    hidden: int = 64
    depth: int = 3
    time_dim: int = 32


@dataclass
class CcdWeights:
    kappa: float = DEFAULT_CCD_WEIGHT
    lambda_: float = field(default=DEFAULT_CCD_WEIGHT, metadata={"key": "lambda"})
    eta: float = DEFAULT_CCD_WEIGHT


@dataclass
class CcdConfig:
    preconditioner: str = "fisher"  # fisher | identity
    diag_only: bool = True
    damping: float = DEFAULT_DAMPING
    ukc_weight_max: float = UKC_WEIGHT_MAX
    lkc_weight_max: float = LKC_WEIGHT_MAX
    ikc_student_on_replay: bool = False


@dataclass
class RegularizerConfig:
    l2: float = DEFAULT_L2_STRENGTH
    ewc: float = DEFAULT_EWC_STRENGTH
    fisher_batches: int = 32


@dataclass
class EvalConfig:
    n_eval: int = DEFAULT_N_EVAL
    embed_seed: int = DEFAULT_EMBED_SEED
    embed_mode: str = "random"  # random | identity
    feature_dim: int = DEFAULT_FEATURE_DIM


@dataclass
class CollapseConfig:
    factor: float = 10.0
    min_fd: float = 0.05


@dataclass
class RunConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    method: str = "ccd"
    seed: int = 0
    steps_per_task: int = DEFAULT_STEPS_PER_TASK
    epochs: Optional[int] = None
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    buffer_capacity: int = DEFAULT_BUFFER_CAPACITY
    label_dropout: float = DEFAULT_LABEL_DROPOUT
    head_weight: float = 1.0
    reinit_head: bool = False
    log_every: int = 100
    save_checkpoints: bool = True
    dump_buffer: bool = True
    dataset: DatasetConfig = _section(DatasetConfig)
    schedule: ScheduleConfig = _section(ScheduleConfig)
    model: ModelConfig = _section(ModelConfig)
    weights: CcdWeights = _section(CcdWeights)
    ccd: CcdConfig = _section(CcdConfig)
    regularizer: RegularizerConfig = _section(RegularizerConfig)
    eval: EvalConfig = _section(EvalConfig)
    collapse: CollapseConfig = _section(CollapseConfig)

    @property
    def uses_replay(self) -> bool:
        return self.method in REPLAY_METHODS

    @property
    def dataset_seed(self) -> int:
        return self.seed if self.dataset.seed is None else self.dataset.seed


def _coerce(value: Any, default: Any, key: str) -> Any:
    if default is None:
        if value is None:
            return None
        expected = int
    else:
        expected = type(default)
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}' must be a boolean, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' must be an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}' must be a number, got {value!r}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{key}' must be a string, got {value!r}")
        return value
    raise ConfigError(f"'{key}' has an unsupported type")


def _build(cls, data: Any, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix.rstrip('.') or 'config'}' must be a JSON object")
    known = {f.metadata.get("key", f.name): f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(prefix + k for k in unknown))
    kwargs = {}
    for key, f in known.items():
        if key not in data:
            continue
        section = f.metadata.get("section")
        if section is not None:
            kwargs[f.name] = _build(section, data[key], f"{prefix}{key}.")
        else:
            default = f.default if f.default is not MISSING else None
            kwargs[f.name] = _coerce(data[key], default, prefix + key)
    return cls(**kwargs)


def _dump(obj) -> Dict[str, Any]:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = f.metadata.get("key", f.name)
        out[key] = _dump(value) if f.metadata.get("section") else value
    return out


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"'{key}' {message}")


def _finite_nonnegative(value: float) -> bool:
    return math.isfinite(value) and value >= 0.0


def validate(cfg: RunConfig) -> RunConfig:
    _require(cfg.schema_version == CONFIG_SCHEMA_VERSION, "schema_version",
             f"must be {CONFIG_SCHEMA_VERSION}, got {cfg.schema_version}")
    _require(cfg.method in METHODS, "method", f"must be one of {METHODS}, got '{cfg.method}'")
    _require(cfg.buffer_capacity >= 0, "buffer_capacity", "must be >= 0")
    if cfg.uses_replay:
        _require(cfg.buffer_capacity >= 1, "buffer_capacity", f"must be >= 1 for method '{cfg.method}'")
    _require(cfg.steps_per_task >= 1, "steps_per_task", "must be >= 1")
    _require(cfg.epochs is None or cfg.epochs >= 1, "epochs", "must be null or >= 1")
    _require(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    _require(math.isfinite(cfg.learning_rate) and cfg.learning_rate > 0, "learning_rate", "must be > 0")
    _require(0.0 <= cfg.label_dropout < 1.0, "label_dropout", "must lie in [0, 1)")
    _require(_finite_nonnegative(cfg.head_weight), "head_weight", "must be >= 0")
    _require(cfg.log_every >= 1, "log_every", "must be >= 1")

    d = cfg.dataset
    _require(d.kind in DATASET_KINDS, "dataset.kind", f"must be one of {DATASET_KINDS}, got '{d.kind}'")
    _require(d.num_tasks >= 1, "dataset.num_tasks", "must be >= 1")
    _require(d.classes_per_task >= 1, "dataset.classes_per_task", "must be >= 1")
    _require(0.0 < d.test_fraction < 1.0, "dataset.test_fraction", "must lie in (0, 1)")
    n_test = int(round(d.samples_per_task * d.test_fraction))
    _require(n_test >= 2 and d.samples_per_task - n_test >= 1, "dataset.samples_per_task",
             "too small for the train/test split")

    s = cfg.schedule
    _require(s.T >= 2, "schedule.T", "must be >= 2")
    _require(0.0 < s.beta_min <= s.beta_max < 1.0, "schedule.beta_min",
             "and beta_max must satisfy 0 < beta_min <= beta_max < 1")
    _require(s.kind in SCHEDULE_KINDS, "schedule.kind", f"must be one of {SCHEDULE_KINDS}")

    m = cfg.model
    _require(m.hidden >= 1, "model.hidden", "must be >= 1")
    _require(m.depth >= 1, "model.depth", "must be >= 1")
    _require(m.time_dim >= 1, "model.time_dim", "must be >= 1")

    for key, value in _dump(cfg.weights).items():
        _require(_finite_nonnegative(value), f"weights.{key}", "must be a finite value >= 0")

    c = cfg.ccd
    _require(c.preconditioner in ("fisher", "identity"), "ccd.preconditioner", "must be 'fisher' or 'identity'")
    _require(math.isfinite(c.damping) and c.damping > 0, "ccd.damping", "must be > 0")
    _require(c.ukc_weight_max > 0, "ccd.ukc_weight_max", "must be > 0")
    _require(c.lkc_weight_max > 0, "ccd.lkc_weight_max", "must be > 0")

    r = cfg.regularizer
    _require(_finite_nonnegative(r.l2), "regularizer.l2", "must be >= 0")
    _require(_finite_nonnegative(r.ewc), "regularizer.ewc", "must be >= 0")
    _require(r.fisher_batches >= 1, "regularizer.fisher_batches", "must be >= 1")

    e = cfg.eval
    _require(e.n_eval >= 2, "eval.n_eval", "must be >= 2")
    _require(e.embed_mode in ("random", "identity"), "eval.embed_mode", "must be 'random' or 'identity'")
    _require(e.feature_dim >= 1, "eval.feature_dim", "must be >= 1")

    _require(cfg.collapse.factor > 0, "collapse.factor", "must be > 0")
    _require(cfg.collapse.min_fd >= 0, "collapse.min_fd", "must be >= 0")
    return cfg


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    return validate(_build(RunConfig, data))


def config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    """Fully resolved config, every default spelled out."""
    return _dump(cfg)


def load_config(path: Union[str, Path]) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}") from None
    return config_from_dict(data)


def replace_section(cfg: RunConfig, **changes) -> RunConfig:
    """Copy of ``cfg`` with top-level fields replaced, re-validated."""
    data = config_to_dict(cfg)
    data.update(changes)
    return config_from_dict(data)

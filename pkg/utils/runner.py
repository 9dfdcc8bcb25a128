"""
K-task continual training protocol.

For each task k: freeze the teacher (k > 1), train with the configured
method, refresh the replay buffer, then evaluate the fidelity of every task
seen so far. All randomness comes from generators keyed on
(run seed, purpose, task, ...), so a run is a pure function of its config.
"""

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from config import RunConfig, config_from_dict, config_to_dict
from utils import baselines, diffusion
from utils.baselines import LOG_TERMS, MethodState, StepBatch
from utils.datasets import TaskSpec, TaskStream, class_balanced_draw, make_stream, task_data
from utils.denoiser import ArchConfig, Denoiser, TeacherSnapshot, checkpoint_task_index, freeze_snapshot, init_denoiser
from utils.denoiser import load as load_checkpoint
from utils.denoiser import save as save_checkpoint
from utils.diffusion import NoiseSchedule, build_schedule
from utils.errors import CheckpointError, CollapseError, ConfigError, ModelError, NonFiniteLossError
from utils.metrics import FidelityMatrix, GaussianStats, fit_gaussian, frechet_distance, imf, make_embedding, mf
from utils.optim import Adam
from utils.replay_buffer import ReplayBuffer

logger = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ("task", "step", "method") + LOG_TERMS

# rng purposes
TRAIN, EVAL, FISHER, HEAD = 1, 2, 3, 4


@dataclass
class RunRecord:
    config: RunConfig
    fidelity: FidelityMatrix
    loss_log: List[Dict] = field(default_factory=list)
    task_seconds: List[float] = field(default_factory=list)
    teacher_hashes: List[Optional[str]] = field(default_factory=list)
    collapsed: bool = False
    failed: bool = False
    reason: str = ""

    @property
    def complete(self) -> bool:
        return self.fidelity.completed_rows == self.fidelity.num_tasks

    @property
    def mf(self) -> Optional[float]:
        return mf(self.fidelity) if self.complete else None

    @property
    def imf(self) -> Optional[float]:
        return imf(self.fidelity) if self.complete else None

    @property
    def status(self) -> str:
        if self.failed:
            return "failed"
        return "collapsed" if self.collapsed else "ok"

    def summary(self) -> Dict:
        return {
            "schema_version": self.config.schema_version,
            "method": self.config.method,
            "seed": self.config.seed,
            "status": self.status,
            "reason": self.reason,
            "MF": self.mf,
            "IMF": self.imf,
            "fidelity": self.fidelity.rows(),
            "task_seconds": self.task_seconds,
            "teacher_hashes": self.teacher_hashes,
            "config": config_to_dict(self.config),
        }


def build_stream(config: RunConfig) -> TaskStream:
    d = config.dataset
    return make_stream(d.kind, d.num_tasks, d.classes_per_task, config.dataset_seed,
                       d.samples_per_task, d.test_fraction)


def build_run_schedule(config: RunConfig) -> NoiseSchedule:
    s = config.schedule
    return build_schedule(s.T, s.beta_min, s.beta_max, s.kind)


def build_arch(config: RunConfig, stream: TaskStream) -> ArchConfig:
    m = config.model
    return ArchConfig(stream.input_dim, stream.num_labels, m.hidden, m.depth, m.time_dim)


def steps_for_task(config: RunConfig, n_train: int) -> int:
    if config.epochs is not None:
        return config.epochs * math.ceil(n_train / config.batch_size)
    return config.steps_per_task


def _rng(config: RunConfig, purpose: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, purpose, *keys])


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless shuffled passes over range(n); the last batch of a pass may be short."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


class Evaluator:
    """Fidelity of generated samples against each task's held-out split, in a fixed embedding."""

    def __init__(self, config: RunConfig, stream: TaskStream, schedule: NoiseSchedule):
        self.config = config
        self.stream = stream
        self.schedule = schedule
        e = config.eval
        self.embedding = make_embedding(stream.input_dim, e.embed_seed, e.feature_dim, e.embed_mode)
        self._reference: Dict[int, GaussianStats] = {}

    def reference(self, spec: TaskSpec) -> GaussianStats:
        if spec.task_id not in self._reference:
            x, _ = task_data(spec, "test")
            self._reference[spec.task_id] = fit_gaussian(self.embedding(x))
        return self._reference[spec.task_id]

    def fidelity(self, model, k: int, i: int) -> float:
        spec = self.stream.task(i)
        rng = _rng(self.config, EVAL, k, i)
        n = self.config.eval.n_eval
        labels = class_balanced_draw(spec, n, rng)
        samples = diffusion.ancestral_sample(model, labels, n, self.schedule, rng)
        if not np.all(np.isfinite(samples)):
            raise CollapseError(f"non-finite samples generated for task {i}", task=k, step=-1, term="sample")
        return frechet_distance(fit_gaussian(self.embedding(samples)), self.reference(spec))

    def row(self, model, k: int) -> List[float]:
        return [self.fidelity(model, k, i) for i in range(1, k + 1)]


def train_task(model: Denoiser, teacher: Optional[TeacherSnapshot], task: Tuple[np.ndarray, np.ndarray],
               buffer: Optional[ReplayBuffer], config: RunConfig, schedule: NoiseSchedule, task_id: int,
               anchor: Optional[Dict[str, np.ndarray]] = None,
               fisher: Optional[Dict[str, np.ndarray]] = None) -> Tuple[Denoiser, List[Dict]]:
    x, y = task
    rng = _rng(config, TRAIN, task_id)
    steps = steps_for_task(config, len(y))
    state = MethodState(model=model, schedule=schedule, config=config, teacher=teacher, anchor=anchor, fisher=fisher)
    optimizer = Adam(lr=config.learning_rate)
    replay = config.uses_replay and buffer is not None and len(buffer) > 0
    batches = _minibatches(len(y), config.batch_size, rng)
    log: List[Dict] = []

    for step in range(1, steps + 1):
        idx = next(batches)
        x0, y0 = x[idx], y[idx]
        current = diffusion.noise_batch(x0, y0, schedule, rng)
        current.labels = diffusion.drop_labels(y0, model.null_label, config.label_dropout, rng)
        batch = StepBatch(current=current, current_labels=y0)
        if replay:
            rx, ry, _ = buffer.sample_pairs(len(idx), rng)
            replayed = diffusion.noise_batch(rx, ry, schedule, rng, t=current.t)
            replayed.labels = diffusion.drop_labels(ry, model.null_label, config.label_dropout, rng)
            batch.replay, batch.replay_labels = replayed, ry

        try:
            result = baselines.baseline_step(config.method, state, batch)
        except NonFiniteLossError as e:
            raise CollapseError(f"non-finite {e.term} loss", task=task_id, step=step, term=e.term) from None

        optimizer.step(model.params, result.grads)
        if not all(np.all(np.isfinite(model.params[n])) for n in model.names):
            raise CollapseError("non-finite parameters after update", task=task_id, step=step, term="params")

        log.append({"task": task_id, "step": step, "method": config.method, **result.terms})
        if step % config.log_every == 0 or step == steps:
            shown = ", ".join(f"{name}={result.terms[name]:.4f}" for name in LOG_TERMS if result.terms[name])
            logger.debug(f"task {task_id} step {step}/{steps}: {shown}")
    return model, log


class RunArtifacts:
    """Files of one run directory."""

    def __init__(self, out_dir: Union[str, Path]):
        self.root = Path(out_dir)

    def prepare(self) -> "RunArtifacts":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    @property
    def run_json(self) -> Path:
        return self.root / "run.json"

    @property
    def fidelity_csv(self) -> Path:
        return self.root / "fidelity_matrix.csv"

    @property
    def loss_log_csv(self) -> Path:
        return self.root / "loss_log.csv"

    def checkpoint(self, k: int) -> Path:
        return self.root / f"ckpt_task{k}.bin"

    def buffer_dump(self, k: int) -> Path:
        return self.root / f"buffer_task{k}.json"

    def write_schedule(self, schedule: NoiseSchedule) -> None:
        (self.root / "schedule.json").write_text(schedule.to_json(), encoding="utf-8")

    def write_record(self, record: RunRecord) -> None:
        record.fidelity.write_csv(self.fidelity_csv)
        with open(self.loss_log_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOSS_LOG_COLUMNS)
            for row in record.loss_log:
                writer.writerow([row["task"], row["step"], row["method"]]
                                + [repr(float(row[name])) for name in LOG_TERMS])
        self.run_json.write_text(json.dumps(record.summary(), indent=2, sort_keys=True), encoding="utf-8")


def _check_collapse(record: RunRecord, k: int) -> None:
    c = record.config.collapse
    baseline = max(record.fidelity.get(1, 1), c.min_fd)
    diagonal = record.fidelity.get(k, k)
    if diagonal > c.factor * baseline and not record.collapsed:
        record.collapsed = True
        record.reason = f"fidelity blow-up on task {k}: d[{k},{k}]={diagonal:.4g} > {c.factor:g} x {baseline:.4g}"
        logger.warning(f"⚠️ {record.reason}")


def run_continual(config: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> RunRecord:
    """Train over every task of the configured stream, evaluating after each task.

    A non-finite loss raises :class:`CollapseError` after the partial record
    has been written (when ``out_dir`` is given).
    """
    stream = build_stream(config)
    schedule = build_run_schedule(config)
    model = init_denoiser(build_arch(config, stream), config.seed)
    buffer = ReplayBuffer(config.buffer_capacity, config.seed) if config.uses_replay else None
    evaluator = Evaluator(config, stream, schedule)
    record = RunRecord(config=config, fidelity=FidelityMatrix(stream.num_tasks))
    artifacts = RunArtifacts(out_dir).prepare() if out_dir is not None else None
    if artifacts:
        artifacts.write_schedule(schedule)

    fisher = None
    logger.info(f"Run: method={config.method}, seed={config.seed}, {stream.kind} K={stream.num_tasks}, "
                f"L={stream.num_labels}, d={stream.input_dim}")
    try:
        for k in range(1, stream.num_tasks + 1):
            x, y = task_data(stream.task(k), "train")
            teacher = freeze_snapshot(model) if k > 1 else None
            record.teacher_hashes.append(teacher.hash if teacher else None)
            anchor = None
            if k > 1 and config.method in ("l2", "ewc"):
                anchor = {n: model.params[n].copy() for n in model.trunk_names}
            if k > 1 and config.reinit_head:
                model.reinit_head(_rng(config, HEAD, k))

            logger.info(f"Task {k}/{stream.num_tasks}: labels {stream.task(k).labels}, "
                        f"{steps_for_task(config, len(y))} steps")
            started = time.perf_counter()
            model, log = train_task(model, teacher, (x, y), buffer, config, schedule, k, anchor, fisher)
            record.task_seconds.append(round(time.perf_counter() - started, 3))
            record.loss_log.extend(log)
            if teacher is not None and teacher.digest() != teacher.hash:
                raise ModelError(f"teacher snapshot of task {k - 1} changed during training")

            if buffer is not None:
                buffer.update_after_task(x, y, k)
            if config.method == "ewc":
                fisher = baselines.estimate_fisher(model, x, y, schedule, _rng(config, FISHER, k),
                                                   config.regularizer.fisher_batches, config.batch_size,
                                                   config.label_dropout)

            row = evaluator.row(model, k)
            for i, fd in enumerate(row, start=1):
                record.fidelity.set(k, i, fd)
            logger.info(f"Fidelity after task {k}: " + ", ".join(f"{fd:.4f}" for fd in row))
            _check_collapse(record, k)

            if artifacts:
                if config.save_checkpoints:
                    save_checkpoint(model, artifacts.checkpoint(k), task_index=k)
                if buffer is not None and config.dump_buffer:
                    buffer.dump(artifacts.buffer_dump(k))
    except CollapseError as e:
        record.failed = True
        record.reason = str(e)
        logger.error(f"❌ Generative collapse: {e}")
        if artifacts:
            artifacts.write_record(record)
        raise

    if artifacts:
        artifacts.write_record(record)
    logger.info(f"Run finished: status={record.status}, MF={record.mf:.4f}, IMF={record.imf:.4f}")
    return record


def load_run_config(run_dir: Union[str, Path]) -> RunConfig:
    path = Path(run_dir) / "run.json"
    try:
        summary = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    return config_from_dict(summary["config"])


def evaluate_checkpoint(run_dir: Union[str, Path], k: int) -> List[float]:
    """Recompute fidelity row k from the run's saved checkpoint and config."""
    config = load_run_config(run_dir)
    stream = build_stream(config)
    if not 1 <= k <= stream.num_tasks:
        raise ConfigError(f"task {k} outside 1..{stream.num_tasks}")
    path = RunArtifacts(run_dir).checkpoint(k)
    if not path.exists():
        raise ConfigError(f"no checkpoint for task {k} in {run_dir}")
    stored = checkpoint_task_index(path)
    if stored is not None and stored != k:
        raise CheckpointError(f"{path} holds the model after task {stored}, not {k}")
    model = load_checkpoint(path)
    return Evaluator(config, stream, build_run_schedule(config)).row(model, k)

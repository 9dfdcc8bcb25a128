"""
Per-step objectives for every training method and their gradients.

naive  noise-prediction loss on the current task only
er     plus the same loss on a paired replay minibatch
l2     naive + c * ||theta - theta_prev||^2 over the trunk
ewc    naive + c * sum F (theta - theta_prev)^2 with a diagonal empirical Fisher
agem   naive gradient projected against the replay gradient
ccd    er + weighted ikc/ukc/lkc consistency terms

Every method also trains the label head with cross-entropy on clean samples;
the head sits behind a stop-gradient so it never moves the trunk.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from config import RunConfig
from utils import autodiff as ad
from utils import ccd_losses, diffusion
from utils.denoiser import Denoiser, Params, TeacherSnapshot
from utils.diffusion import NoisedBatch, NoiseSchedule
from utils.errors import ConfigError, NonFiniteLossError

logger = logging.getLogger(__name__)

LOG_TERMS = ("base", "ikc", "ukc", "lkc", "reg", "head", "total")


@dataclass
class StepBatch:
    current: NoisedBatch  # labels already passed through dropout
    current_labels: np.ndarray
    replay: Optional[NoisedBatch] = None
    replay_labels: Optional[np.ndarray] = None


@dataclass
class MethodState:
    model: Denoiser
    schedule: NoiseSchedule
    config: RunConfig
    teacher: Optional[TeacherSnapshot] = None
    anchor: Optional[Dict[str, np.ndarray]] = None
    fisher: Optional[Dict[str, np.ndarray]] = None


@dataclass
class StepResult:
    terms: Dict[str, float]
    grads: Dict[str, np.ndarray] = field(default_factory=dict)


Terms = Dict[str, Optional[ad.Tensor]]


def _head_loss(state: MethodState, batch: StepBatch, params: Params):
    """Cross-entropy of the label head on clean samples; also returns the current-half log-probs."""
    model = state.model
    x0, y = batch.current.x0, batch.current_labels
    if batch.replay is not None:
        x0 = np.concatenate([x0, batch.replay.x0])
        y = np.concatenate([y, batch.replay_labels])
    log_probs = model.label_log_probs(x0, params)
    onehot = np.eye(model.num_labels)[y]
    ce = -ad.mean(ad.sum_(log_probs * onehot, axis=-1))
    return ce, ad.index(log_probs, slice(0, batch.current.x0.shape[0]))


def _finish(state: MethodState, terms: Terms, objective: ad.Tensor, head: ad.Tensor) -> Terms:
    if state.config.head_weight > 0.0:
        objective = objective + state.config.head_weight * head
    terms["head"] = head
    terms["total"] = objective
    return terms


def naive_terms(state: MethodState, batch: StepBatch, params: Params) -> Terms:
    base, _ = diffusion.noise_prediction_loss(state.model, batch.current, params)
    head, _ = _head_loss(state, batch, params)
    return _finish(state, {"base": base}, base, head)


def _replay_base(state: MethodState, batch: StepBatch, params: Params):
    base, eps_cur = diffusion.noise_prediction_loss(state.model, batch.current, params)
    if batch.replay is not None:
        replay_loss, _ = diffusion.noise_prediction_loss(state.model, batch.replay, params)
        base = base + replay_loss
    return base, eps_cur


def er_terms(state: MethodState, batch: StepBatch, params: Params) -> Terms:
    base, _ = _replay_base(state, batch, params)
    head, _ = _head_loss(state, batch, params)
    return _finish(state, {"base": base}, base, head)


def _anchor_penalty(state: MethodState, params: Params, strength: float, weights=None) -> Optional[ad.Tensor]:
    if strength == 0.0 or state.anchor is None:
        return None
    penalty = None
    for name in state.model.trunk_names:
        diff = params[name] - state.anchor[name]
        sq = diff * diff if weights is None else diff * diff * weights[name]
        term = ad.sum_(sq)
        penalty = term if penalty is None else penalty + term
    return strength * penalty


def l2_terms(state: MethodState, batch: StepBatch, params: Params) -> Terms:
    base, _ = diffusion.noise_prediction_loss(state.model, batch.current, params)
    head, _ = _head_loss(state, batch, params)
    reg = _anchor_penalty(state, params, state.config.regularizer.l2)
    objective = base if reg is None else base + reg
    return _finish(state, {"base": base, "reg": reg}, objective, head)


def ewc_terms(state: MethodState, batch: StepBatch, params: Params) -> Terms:
    base, _ = diffusion.noise_prediction_loss(state.model, batch.current, params)
    head, _ = _head_loss(state, batch, params)
    reg = None
    if state.fisher is not None:
        reg = _anchor_penalty(state, params, state.config.regularizer.ewc, state.fisher)
    objective = base if reg is None else base + reg
    return _finish(state, {"base": base, "reg": reg}, objective, head)


def ccd_terms(state: MethodState, batch: StepBatch, params: Params) -> Terms:
    cfg = state.config
    base, eps_cur = _replay_base(state, batch, params)
    head, current_log_probs = _head_loss(state, batch, params)
    terms: Terms = {"base": base}
    if state.teacher is None or batch.replay is None:
        return _finish(state, terms, base, head)

    current, replay = batch.current, batch.replay
    teacher, model, schedule = state.teacher, state.model, state.schedule
    terms["ikc"] = ccd_losses.ikc_loss(
        teacher, model, (replay.x_t, batch.replay_labels), (current.x_t, current.labels), current.t,
        cfg.ccd, params, student_eps=eps_cur)
    terms["ukc"] = ccd_losses.ukc_loss(
        teacher, model, current.x_t, replay.x_t, current.t, schedule, cfg.ccd.ukc_weight_max, params)
    terms["lkc"] = ccd_losses.lkc_loss(
        teacher, model, replay.x0, current.x0, current.t, schedule, cfg.ccd.lkc_weight_max, params,
        student_log_probs=current_log_probs)
    objective = ccd_losses.total_loss(base, terms["ikc"], terms["ukc"], terms["lkc"], cfg.weights)
    return _finish(state, terms, objective, head)


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project ``g`` so that <g', g_ref> >= 0; unchanged when already non-negative."""
    dot = float(np.dot(g, g_ref))
    ref_sq = float(np.dot(g_ref, g_ref))
    if dot >= 0.0 or ref_sq == 0.0:
        return g
    return g - (dot / ref_sq) * g_ref


def _values(terms: Terms) -> Dict[str, float]:
    return {name: (float(terms[name].data) if terms.get(name) is not None else 0.0) for name in LOG_TERMS}


def _check_finite(terms: Terms) -> None:
    for name in LOG_TERMS:
        term = terms.get(name)
        if term is not None and not np.all(np.isfinite(term.data)):
            raise NonFiniteLossError(f"non-finite {name} loss", term=name)


def _gradients(objective: ad.Tensor, params: Params, names: List[str]) -> Dict[str, np.ndarray]:
    grads = ad.grad(objective, [params[n] for n in names])
    return dict(zip(names, grads))


def agem_step(state: MethodState, batch: StepBatch) -> StepResult:
    model = state.model
    params = model.tensors()
    terms = naive_terms(state, batch, params)
    _check_finite(terms)
    grads = _gradients(terms["total"], params, model.names)
    if batch.replay is None:
        return StepResult(_values(terms), grads)

    ref_params = model.tensors()
    ref_loss, _ = diffusion.noise_prediction_loss(model, batch.replay, ref_params)
    if not np.isfinite(ref_loss.data):
        raise NonFiniteLossError("non-finite agem reference loss", term="reg")
    trunk = model.trunk_names
    ref = _gradients(ref_loss, ref_params, trunk)

    flat = np.concatenate([grads[n].ravel() for n in trunk])
    flat_ref = np.concatenate([ref[n].ravel() for n in trunk])
    projected = agem_project(flat, flat_ref)
    offset = 0
    for n in trunk:
        size = grads[n].size
        grads[n] = projected[offset:offset + size].reshape(grads[n].shape)
        offset += size
    values = _values(terms)
    values["reg"] = float(ref_loss.data)
    return StepResult(values, grads)


METHODS: Dict[str, Callable[[MethodState, StepBatch, Params], Terms]] = {
    "naive": naive_terms,
    "er": er_terms,
    "l2": l2_terms,
    "ewc": ewc_terms,
    "ccd": ccd_terms,
}


def baseline_step(method: str, state: MethodState, batch: StepBatch) -> StepResult:
    """Loss terms and parameter gradients of one optimizer step for ``method``."""
    if method == "agem":
        return agem_step(state, batch)
    try:
        terms_fn = METHODS[method]
    except KeyError:
        raise ConfigError(f"unknown method '{method}' (expected one of {sorted(list(METHODS) + ['agem'])})") from None
    params = state.model.tensors()
    terms = terms_fn(state, batch, params)
    _check_finite(terms)
    return StepResult(_values(terms), _gradients(terms["total"], params, state.model.names))


def estimate_fisher(model: Denoiser, x: np.ndarray, y: np.ndarray, schedule: NoiseSchedule,
                    rng: np.random.Generator, batches: int, batch_size: int,
                    label_dropout: float = 0.0) -> Dict[str, np.ndarray]:
    """Diagonal empirical Fisher: mean over samples of the squared per-sample gradient of the noise loss.

    ``batches`` x ``batch_size`` samples are drawn; the estimate does not scale with ``batch_size``.
    """
    trunk = model.trunk_names
    fisher = {n: np.zeros_like(model.params[n]) for n in trunk}
    for _ in range(batches):
        idx = rng.integers(0, len(y), size=batch_size)
        labels = diffusion.drop_labels(y[idx], model.null_label, label_dropout, rng)
        noised = diffusion.noise_batch(x[idx], labels, schedule, rng)
        for j in range(batch_size):
            row = slice(j, j + 1)
            single = NoisedBatch(x0=noised.x0[row], labels=noised.labels[row], t=noised.t[row],
                                 eps=noised.eps[row], x_t=noised.x_t[row])
            params = model.tensors()
            loss, _ = diffusion.noise_prediction_loss(model, single, params)
            for n, g in zip(trunk, ad.grad(loss, [params[n] for n in trunk])):
                fisher[n] += g * g
    for n in trunk:
        fisher[n] /= batches * batch_size
    logger.debug(f"Fisher estimated over {batches} batches, mean {np.mean([f.mean() for f in fisher.values()]):.3e}")
    return fisher

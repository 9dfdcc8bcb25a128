"""
Consistency terms that bind the adapting model to the frozen model of the
previous task: the curvature-weighted noise-prediction divergence (ikc), the
reverse-mean alignment (ukc) and the label-distribution alignment (lkc),
plus the weighted total.

Teacher outputs enter every term as constants; only the student's tensors
carry gradient.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from config import FULL_PRECONDITIONER_MAX_DIM, LKC_WEIGHT_MAX, UKC_WEIGHT_MAX, CcdConfig, CcdWeights
from utils import autodiff as ad
from utils.diffusion import NoiseSchedule, check_timesteps, reverse_mean
from utils.errors import LossError, NonFiniteLossError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
NEGATIVE_TOLERANCE = 1e-9
TERMS = ("ikc", "ukc", "lkc")


@dataclass(frozen=True, eq=False)
class Preconditioner:
    """Symmetric positive-definite metric; ``values`` is the diagonal or the full matrix."""

    values: np.ndarray
    damping: float
    diag_only: bool = True

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def as_matrix(self) -> np.ndarray:
        return np.diag(self.values) if self.diag_only else self.values

    def scaled(self, c: float) -> "Preconditioner":
        return Preconditioner(self.values * c, self.damping * c, self.diag_only)

    @classmethod
    def identity(cls, dim: int) -> "Preconditioner":
        return cls(np.ones(dim), 1.0, True)


def preconditioner_from_gradients(g, diag_only: bool = True, damping: float = 1e-3) -> Preconditioner:
    """mean g g^T + damping I over the rows of ``g`` (diagonal only if asked)."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise LossError(f"preconditioner needs a non-empty (batch, dim) gradient array, got {g.shape}")
    if damping <= 0:
        raise LossError(f"damping must be positive, got {damping}")
    n, d = g.shape
    if diag_only:
        return Preconditioner(np.mean(g * g, axis=0) + damping, damping, True)
    if d > FULL_PRECONDITIONER_MAX_DIM:
        raise LossError(f"full preconditioner limited to dim <= {FULL_PRECONDITIONER_MAX_DIM}, got {d}")
    outer = g.T @ g / n
    return Preconditioner(0.5 * (outer + outer.T) + damping * np.eye(d), damping, False)


def teacher_gradients(teacher, x_hat_t, y_hat, t) -> Tuple[np.ndarray, np.ndarray]:
    """Teacher noise predictions and the input-gradient of 0.5 * ||eps||^2 per sample."""
    x_hat_t = np.asarray(x_hat_t, dtype=np.float64)
    if x_hat_t.ndim != 2 or x_hat_t.shape[0] == 0:
        raise LossError(f"empty replay batch for the preconditioner: shape {x_hat_t.shape}")
    with ad.enable_grad():
        leaf = ad.Tensor(x_hat_t, requires_grad=True)
        eps = teacher.predict_noise(leaf, t, y_hat)
        # samples do not interact, so the batch sum separates per row
        surrogate = 0.5 * ad.sum_(ad.sq_l2(eps, axis=-1))
        (g,) = ad.grad(surrogate, [leaf])
    return eps.data.copy(), g


def fisher_preconditioner(teacher, x_hat_t, y_hat, t, diag_only: bool = True,
                          damping: float = 1e-3) -> Preconditioner:
    _, g = teacher_gradients(teacher, x_hat_t, y_hat, t)
    return preconditioner_from_gradients(g, diag_only, damping)


def bregman_div(u, v, precond: Preconditioner) -> ad.Tensor:
    """0.5 (u-v)^T phi (u-v) along the last axis; one value per row for batched input."""
    u, v = ad.as_tensor(u), ad.as_tensor(v)
    if u.shape != v.shape:
        raise LossError(f"bregman_div operands differ in shape: {u.shape} vs {v.shape}", term="ikc")
    if u.shape[-1] != precond.dim:
        raise LossError(f"preconditioner dim {precond.dim} does not match operand dim {u.shape[-1]}", term="ikc")
    diff = u - v
    if precond.diag_only:
        quad = ad.sum_(diff * diff * precond.values, axis=-1)
    else:
        quad = ad.sum_(ad.matmul(diff, precond.values) * diff, axis=-1)
    return 0.5 * quad


def ikc_loss(teacher, student, replay_batch, current_batch, t, cfg: Optional[CcdConfig] = None,
             params=None, student_eps: Optional[ad.Tensor] = None) -> ad.Tensor:
    """Mean divergence between teacher predictions on the replay half and student
    predictions on the current half.

    ``student_eps`` reuses a prediction already made for the base loss. With
    ``cfg.ikc_student_on_replay`` the divergence to the student's own replay
    prediction, conditioned on the same labels as the teacher, is averaged in.
    """
    cfg = cfg or CcdConfig()
    x_hat_t, y_hat = replay_batch
    x_t, y = current_batch
    if np.shape(x_hat_t)[0] != np.shape(x_t)[0]:
        raise LossError(f"replay batch ({np.shape(x_hat_t)[0]}) and current batch ({np.shape(x_t)[0]}) differ in size",
                        term="ikc")

    if cfg.preconditioner == "identity":
        with ad.no_grad():
            teacher_eps = teacher.predict_noise(x_hat_t, t, y_hat).data
        precond = Preconditioner.identity(teacher_eps.shape[-1])
    else:
        teacher_eps, g = teacher_gradients(teacher, x_hat_t, y_hat, t)
        precond = preconditioner_from_gradients(g, cfg.diag_only, cfg.damping)

    if student_eps is None:
        student_eps = student.predict_noise(x_t, t, y, params)
    loss = ad.mean(bregman_div(teacher_eps, student_eps, precond))
    if cfg.ikc_student_on_replay:
        student_replay_eps = student.predict_noise(x_hat_t, t, y_hat, params)
        loss = 0.5 * (loss + ad.mean(bregman_div(teacher_eps, student_replay_eps, precond)))
    return loss


def ukc_weight(alpha_bar, w_max: Optional[float] = UKC_WEIGHT_MAX) -> np.ndarray:
    """alpha_bar^2 / (1 - alpha_bar^2), clamped to ``w_max``."""
    signal = np.asarray(alpha_bar, dtype=np.float64) ** 2
    noise = 1.0 - signal
    singular = noise <= 0.0
    if w_max is None:
        if np.any(singular):
            raise LossError("ukc weight is singular where alpha_bar == 1; set a clamp", term="ukc")
        return signal / noise
    w = np.divide(signal, noise, out=np.full_like(signal, np.inf), where=~singular)
    return np.minimum(w, w_max)


def ukc_loss(teacher, student, current_x_t, replay_x_t, t, schedule: NoiseSchedule,
             w_max: Optional[float] = UKC_WEIGHT_MAX, params=None) -> ad.Tensor:
    """Weighted squared distance between student and teacher reverse means, null label."""
    t = check_timesteps(schedule, t)
    if np.shape(current_x_t) != np.shape(replay_x_t):
        raise LossError(f"ukc inputs differ in shape: {np.shape(current_x_t)} vs {np.shape(replay_x_t)}", term="ukc")
    w = ukc_weight(schedule.alpha_bar[t], w_max)
    with ad.no_grad():
        target = reverse_mean(teacher, replay_x_t, t, schedule).data
    mu = reverse_mean(student, current_x_t, t, schedule, params=params)
    per_pair = ad.sq_l2(mu - target, axis=-1)
    return ad.mean(per_pair * w)


def lkc_weight(alpha_bar, beta_bar, w_max: Optional[float] = LKC_WEIGHT_MAX) -> np.ndarray:
    """alpha_bar / beta_bar, clamped to ``w_max``."""
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    beta_bar = np.asarray(beta_bar, dtype=np.float64)
    singular = beta_bar <= 0.0
    if w_max is None:
        if np.any(singular):
            raise LossError("lkc weight is singular where beta_bar == 0; set a clamp", term="lkc")
        return alpha_bar / beta_bar
    w = np.divide(alpha_bar, beta_bar, out=np.full_like(alpha_bar, np.inf), where=~singular)
    return np.minimum(w, w_max)


def kl_divergence(p, q) -> np.ndarray:
    """Row-wise KL(p || q) in nats, both sides floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return np.sum(p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))), axis=-1)


def lkc_loss(teacher_head, student_head, x_hat0, x0, t, schedule: NoiseSchedule,
             w_max: Optional[float] = LKC_WEIGHT_MAX, params=None,
             student_log_probs: Optional[ad.Tensor] = None) -> ad.Tensor:
    """Weighted mean KL(teacher head on replayed x0 || student head on current x0).

    The student side stays in log space (log-softmax), so only the teacher
    probabilities need the floor.
    """
    t = check_timesteps(schedule, t)
    if np.shape(x_hat0)[0] != np.shape(x0)[0]:
        raise LossError(f"lkc batches differ in size: {np.shape(x_hat0)[0]} vs {np.shape(x0)[0]}", term="lkc")
    with ad.no_grad():
        p = np.exp(teacher_head.label_log_probs(x_hat0).data)
    log_p = np.log(np.maximum(p, PROB_FLOOR))
    if student_log_probs is None:
        student_log_probs = student_head.label_log_probs(x0, params)
    if student_log_probs.shape != p.shape:
        raise LossError(f"label sets differ: teacher {p.shape} vs student {student_log_probs.shape}", term="lkc")
    kl = ad.sum_(p * (log_p - student_log_probs), axis=-1)
    w = lkc_weight(schedule.alpha_bar[t], schedule.beta_bar[t], w_max)
    return ad.mean(kl * w)


def _check_term(name: str, term) -> None:
    if term is None:
        return
    value = ad.as_tensor(term).data
    if not np.all(np.isfinite(value)):
        raise NonFiniteLossError(f"non-finite {name} loss", term=name)
    if name in TERMS and np.any(value < -NEGATIVE_TOLERANCE):
        raise LossError(f"{name} loss is negative: {value}", term=name)


def total_loss(base: ad.Tensor, ikc=None, ukc=None, lkc=None,
               weights: Optional[CcdWeights] = None) -> ad.Tensor:
    """base + kappa*ikc + lambda*ukc + eta*lkc; zero-weight terms are left out of the graph."""
    weights = weights or CcdWeights()
    terms = {"ikc": ikc, "ukc": ukc, "lkc": lkc}
    _check_term("base", base)
    for name, term in terms.items():
        _check_term(name, term)

    total = ad.as_tensor(base)
    for name, w in (("ikc", weights.kappa), ("ukc", weights.lambda_), ("lkc", weights.eta)):
        if w == 0.0 or terms[name] is None:
            continue
        total = total + w * terms[name]
    return total

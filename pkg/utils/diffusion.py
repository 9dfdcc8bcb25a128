"""
DDPM noise schedules, forward noising, the conditional noise-prediction loss,
analytic reverse means, ancestral sampling and the noise-to-score conversion.

Notation: ``alpha_bar[t]`` is the square-root-scale cumulative signal
coefficient, so ``alpha_bar[t] ** 2`` is the cumulative product of the
per-step ``alpha`` and ``alpha_bar[t] ** 2 + beta_bar[t] ** 2 == 1``.
Arrays are indexed directly by the timestep, with index 0 holding the
clean-data state (alpha_bar = 1, beta_bar = 0).
"""

import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from utils import autodiff as ad
from utils.errors import DiffusionError, ScheduleError

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("linear", "cosine")
COSINE_OFFSET = 0.008

Timesteps = Union[int, np.ndarray]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_bar: np.ndarray
    sigma: np.ndarray  # ancestral sampler noise scale (posterior std)

    @classmethod
    def from_betas(cls, betas, kind: str = "custom") -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError(f"betas must be a non-empty vector, got shape {betas.shape}")
        if np.any(betas < 0.0) or np.any(betas >= 1.0):
            raise ScheduleError("betas must lie in [0, 1)")
        T = betas.size
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        signal_sq = np.cumprod(alpha)
        alpha_bar = np.sqrt(signal_sq)
        beta_bar = np.sqrt(1.0 - signal_sq)

        sigma_sq = np.zeros(T + 1)
        denom = 1.0 - signal_sq[1:]
        numer = beta[1:] * (1.0 - signal_sq[:-1])
        np.divide(numer, denom, out=sigma_sq[1:], where=denom > 0.0)
        return cls(T=T, kind=kind, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                   beta_bar=beta_bar, sigma=np.sqrt(sigma_sq))

    @property
    def sde_sigma(self) -> np.ndarray:
        """Variance-exploding scale beta_bar / alpha_bar of the equivalent SDE."""
        return self.beta_bar / self.alpha_bar

    def to_dict(self) -> Dict[str, Any]:
        return {
            "T": self.T,
            "kind": self.kind,
            "beta": self.beta[1:].tolist(),
            "alpha_bar": self.alpha_bar[1:].tolist(),
            "beta_bar": self.beta_bar[1:].tolist(),
            "sde_sigma": self.sde_sigma[1:].tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        data = json.loads(text)
        return cls.from_betas(data["beta"], kind=data.get("kind", "custom"))


def build_schedule(T: int, beta_min: float, beta_max: float, kind: str = "linear") -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    T = int(T)
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T)
    elif kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2.0) ** 2
        signal_sq = f / f[0]
        betas = np.minimum(1.0 - signal_sq[1:] / signal_sq[:-1], beta_max)
    else:
        raise ScheduleError(f"unknown schedule kind '{kind}' (expected one of {SCHEDULE_KINDS})")
    schedule = NoiseSchedule.from_betas(betas, kind=kind)
    logger.debug(f"Built {kind} schedule T={T}, alpha_bar_T={schedule.alpha_bar[-1]:.3e}")
    return schedule


def check_timesteps(schedule: NoiseSchedule, t: Timesteps) -> np.ndarray:
    arr = np.asarray(t)
    if arr.size and (not np.issubdtype(arr.dtype, np.integer) or arr.min() < 1 or arr.max() > schedule.T):
        raise ScheduleError(f"timestep out of range [1, {schedule.T}]: {t}")
    return arr


def _per_row(values, like: np.ndarray):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    return values.reshape(values.shape + (1,) * (np.ndim(like) - 1))


def forward_diffuse(x0, t: Timesteps, eps, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = alpha_bar_t * x0 + beta_bar_t * eps."""
    t = check_timesteps(schedule, t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise DiffusionError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    return _per_row(schedule.alpha_bar[t], x0) * x0 + _per_row(schedule.beta_bar[t], x0) * eps


@dataclass
class NoisedBatch:
    x0: np.ndarray
    labels: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    x_t: np.ndarray


def drop_labels(labels, null_label: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).copy()
    if rate > 0.0:
        labels[rng.random(labels.shape[0]) < rate] = null_label
    return labels


def noise_batch(x0, labels, schedule: NoiseSchedule, rng: np.random.Generator,
                t: Optional[np.ndarray] = None) -> NoisedBatch:
    """Draw per-element timesteps (unless given) and noise, and diffuse x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise DiffusionError(f"expected a non-empty (batch, dim) array, got shape {x0.shape}")
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    x_t = forward_diffuse(x0, t, eps, schedule)
    return NoisedBatch(x0=x0, labels=np.asarray(labels, dtype=np.int64), t=t, eps=eps, x_t=x_t)


def noise_prediction_loss(model, batch: NoisedBatch, params=None) -> Tuple[ad.Tensor, ad.Tensor]:
    """Mean over the batch of ||eps_theta(x_t, t, y) - eps||^2; returns (loss, eps_hat)."""
    eps_hat = model.predict_noise(batch.x_t, batch.t, batch.labels, params)
    loss = ad.mean(ad.sq_l2(eps_hat - batch.eps, axis=-1))
    return loss, eps_hat


def ddpm_cond_loss(model, batch, schedule: NoiseSchedule, rng: np.random.Generator,
                   label_dropout: float = 0.0, params=None) -> ad.Tensor:
    x0, y = batch
    labels = np.asarray(y, dtype=np.int64)
    noised = noise_batch(x0, labels, schedule, rng)
    noised.labels = drop_labels(labels, model.null_label, label_dropout, rng)
    loss, _ = noise_prediction_loss(model, noised, params)
    return loss


def posterior_coefficients(schedule: NoiseSchedule, t: Timesteps) -> Tuple[np.ndarray, np.ndarray]:
    """(1/sqrt(alpha_t), (1-alpha_t)/sqrt(alpha_t (1-alpha_bar_t^2))) for t >= 1."""
    t = np.asarray(t)
    if np.any(t == 0):
        raise ScheduleError("no reverse step exists at t=0")
    t = check_timesteps(schedule, t)
    alpha = schedule.alpha[t]
    noise_var = schedule.beta_bar[t] ** 2
    c1 = 1.0 / np.sqrt(alpha)
    denom = np.sqrt(alpha * noise_var)
    c2 = np.divide(1.0 - alpha, denom, out=np.zeros_like(denom), where=denom > 0.0)
    return c1, c2


def reverse_mean(model, x_t, t: Timesteps, schedule: NoiseSchedule, cond=None, params=None) -> ad.Tensor:
    """Analytic reverse-step mean from the model's noise prediction.

    ``cond=None`` evaluates the model with its null label (unconditional).
    """
    c1, c2 = posterior_coefficients(schedule, t)
    x_t = np.asarray(x_t, dtype=np.float64)
    n = x_t.shape[0]
    labels = np.full(n, model.null_label) if cond is None else np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
    steps = np.broadcast_to(np.asarray(t), (n,))
    eps_hat = model.predict_noise(x_t, steps, labels, params)
    return _per_row(c1, x_t) * x_t - ad.mul(_per_row(c2, x_t), eps_hat)


def ancestral_sample(model, label, n: int, schedule: NoiseSchedule, rng: np.random.Generator,
                     params=None) -> np.ndarray:
    """Run the DDPM ancestral chain from pure noise; ``label`` is an int or n labels."""
    if n < 1:
        raise DiffusionError(f"need at least one sample, got n={n}")
    labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,)).copy()
    x = rng.standard_normal((n, model.input_dim))
    with ad.no_grad():
        for step in range(schedule.T, 0, -1):
            c1, c2 = posterior_coefficients(schedule, step)
            eps_hat = model.predict_noise(x, np.full(n, step), labels, params).data
            x = c1 * x - c2 * eps_hat
            if step > 1:
                x = x + schedule.sigma[step] * rng.standard_normal(x.shape)
    return x


def score_from_eps(eps_hat, t: Timesteps, schedule: NoiseSchedule) -> np.ndarray:
    """Score estimate -eps_hat / beta_bar_t from a noise prediction."""
    t = check_timesteps(schedule, t)
    scale = schedule.beta_bar[t]
    if np.any(scale <= 0.0):
        raise ScheduleError(f"beta_bar is zero at t={t}; score undefined")
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    return -eps_hat / _per_row(scale, eps_hat)

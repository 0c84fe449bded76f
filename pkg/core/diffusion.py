"""Continuous-time diffusion on the alpha-cosine schedule.

The denoiser is any callable ``denoiser(x_t, t, text) -> eps_hat`` that
returns an array or a :class:`~core.tensor.Tensor` shaped like ``x_t``.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from core.errors import ConfigError, DimensionError, NumericError
from core.tensor import Tensor

logger = logging.getLogger("EqDiff")

# below this alpha the clean-signal estimate is numerically meaningless
ALPHA_FLOOR = 1e-8


def alpha_sigma(t: float) -> tuple[float, float]:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"diffusion time must lie in [0, 1], got {t}")
    if t == 0.0:
        return 1.0, 0.0
    if t == 1.0:
        return 0.0, 1.0
    return float(np.cos(np.pi * t / 2.0)), float(np.sin(np.pi * t / 2.0))


def transition(t: float, s: float) -> tuple[float, float]:
    """``(alpha_{t|s}, sigma^2_{t|s})`` for 0 <= s < t <= 1."""
    if not s < t:
        raise ConfigError(f"transition needs s < t, got s={s}, t={t}")
    a_t, s_t = alpha_sigma(t)
    a_s, s_s = alpha_sigma(s)
    a_ts = a_t / a_s
    return a_ts, max(s_t * s_t - a_ts * a_ts * s_s * s_s, 0.0)


def posterior_coefficients(t: float, s: float) -> tuple[float, float, float]:
    """Mean weights on ``x_t`` and ``x_hat`` plus the variance of q(x_s | x_t, x)."""
    a_ts, var_ts = transition(t, s)
    a_s, s_s = alpha_sigma(s)
    _, s_t = alpha_sigma(t)
    var_t = s_t * s_t
    return a_ts * s_s * s_s / var_t, a_s * var_ts / var_t, var_ts * s_s * s_s / var_t


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def forward_noise(x, t: float, eps) -> np.ndarray:
    x, eps = _values(x), _values(eps)
    if x.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} differs from data shape {x.shape}")
    a_t, s_t = alpha_sigma(t)
    return a_t * x + s_t * eps


def predict_x0(x_t, eps_hat, t: float, clip: tuple = (-1.0, 1.0)) -> np.ndarray:
    x_t, eps_hat = _values(x_t), _values(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise DimensionError(f"prediction shape {eps_hat.shape} differs from state shape {x_t.shape}")
    a_t, s_t = alpha_sigma(t)
    if a_t < ALPHA_FLOOR:
        raise NumericError(
            f"alpha({t}) = {a_t:.3g} is too small to recover x0; step with posterior_step instead"
        )
    return np.clip((x_t - s_t * eps_hat) / a_t, *clip)


def posterior_step(x_t, eps_hat, t: float, s: float, noise=None, clip: tuple = (-1.0, 1.0)) -> np.ndarray:
    """Draw x_s from q(x_s | x_t, x_hat); ``noise=None`` returns the mean.

    At t where alpha underflows the clean estimate is taken as zero, the
    centre of the normalized data range.
    """
    c_t, c_x, var = posterior_coefficients(t, s)
    x_t = _values(x_t)
    a_t, _ = alpha_sigma(t)
    x_hat = np.zeros_like(x_t) if a_t < ALPHA_FLOOR else predict_x0(x_t, eps_hat, t, clip)
    x_s = c_t * x_t + c_x * x_hat
    if noise is not None and var > 0.0:
        x_s = x_s + np.sqrt(var) * _values(noise)
    if not np.all(np.isfinite(x_s)):
        raise NumericError(f"posterior step {t:.4f} -> {s:.4f} produced non-finite values")
    return x_s


def training_loss(denoiser: Callable, x, t: float, eps, cond=None) -> Tensor:
    """Mean squared error between the true and predicted noise."""
    x_t = forward_noise(x, t, eps)
    prediction = denoiser(x_t, t, cond)
    if not isinstance(prediction, Tensor):
        prediction = Tensor(prediction)
    if prediction.shape != x_t.shape:
        raise DimensionError(f"denoiser returned shape {prediction.shape} for input {x_t.shape}")
    diff = prediction - _values(eps)
    loss = (diff * diff).mean()
    if not np.isfinite(loss.item()):
        raise NumericError(f"training loss is non-finite at t={t:.4f}")
    return loss


@dataclass
class SamplerConfig:
    steps: int = 256
    seed: int = 0
    text: Optional[np.ndarray] = None
    clip: tuple = (-1.0, 1.0)
    resample_n: int = 1

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ConfigError(f"sampler needs at least one step, got {self.steps}")
        if int(self.resample_n) < 1:
            raise ConfigError(f"resample_n must be >= 1, got {self.resample_n}")
        self.steps = int(self.steps)
        self.resample_n = int(self.resample_n)

    def grid(self) -> list[tuple[float, float]]:
        """(t, s) pairs of the uniform grid from t = 1 down to s = 0."""
        return [(k / self.steps, (k - 1) / self.steps) for k in range(self.steps, 0, -1)]


def sample(denoiser: Callable, cfg: SamplerConfig, shape: tuple) -> np.ndarray:
    """Ancestral sampling from standard normal noise, deterministic given the seed."""
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal(shape)
    for t, s in cfg.grid():
        eps_hat = denoiser(x, t, cfg.text)
        noise = rng.standard_normal(shape) if s > 0 else None
        x = posterior_step(x, eps_hat, t, s, noise, cfg.clip)
    return np.clip(x, *cfg.clip)


def repaint_densify(denoiser: Callable, known, mask: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Complete the unknown pixels of ``known`` with the reverse chain.

    Known pixels (``mask`` true) are replaced by a fresh forward-noised copy
    of ``known`` after every step and by ``known`` itself at s = 0. The
    model's random stream is the one :func:`sample` uses, so an empty mask
    reproduces the unconditional sample.
    """
    known = _values(known)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != known.shape[:2]:
        raise DimensionError(f"mask shape {mask.shape} does not match image {known.shape[:2]}")
    if mask.all():
        return known.copy()
    keep = mask[..., None]
    rng = np.random.default_rng(cfg.seed)
    known_rng = np.random.default_rng([cfg.seed, 1])
    x = rng.standard_normal(known.shape)
    for t, s in cfg.grid():
        rounds = cfg.resample_n if s > 0 else 1
        for u in range(rounds):
            eps_hat = denoiser(x, t, cfg.text)
            noise = rng.standard_normal(known.shape) if s > 0 else None
            x = posterior_step(x, eps_hat, t, s, noise, cfg.clip)
            if s > 0:
                x = np.where(keep, forward_noise(known, s, known_rng.standard_normal(known.shape)), x)
                if u < rounds - 1:
                    a_ts, var_ts = transition(t, s)
                    x = a_ts * x + np.sqrt(var_ts) * known_rng.standard_normal(known.shape)
            else:
                x = np.where(keep, known, x)
    return np.where(keep, known, np.clip(x, *cfg.clip))

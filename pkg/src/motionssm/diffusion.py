"""DDPM machinery: schedule, forward process, training objective, samplers.

The denoiser is trained to predict the clean motion; samplers convert that
prediction back to noise, apply classifier-free guidance, and step the
reverse chain with either the stochastic DDPM update or the deterministic
DDIM update. All array math here is numpy; only the training loss builds an
autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad, square


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/alpha-bar arrays, indexed by step t in [1, T]."""

    timesteps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def build_schedule(timesteps: int, beta_start: float = 1e-4,
                   beta_end: float = 1e-2) -> NoiseSchedule:
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(f"invalid beta range ({beta_start}, {beta_end})")
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(timesteps, beta, alpha, alpha_bar)


def _check_step(schedule: NoiseSchedule, t: int):
    if not 1 <= t <= schedule.timesteps:
        raise ValueError(f"step {t} out of range [1, {schedule.timesteps}]")


def q_sample(schedule: NoiseSchedule, m0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Forward process: sqrt(abar_t) * m0 + sqrt(1 - abar_t) * eps.

    t may be a scalar step or a per-item vector matching m0's leading axis.
    """
    m0 = np.asarray(m0)
    eps = np.asarray(eps)
    if m0.shape != eps.shape:
        raise ValueError(f"q_sample: m0 {m0.shape} vs eps {eps.shape}")
    ts = np.atleast_1d(np.asarray(t))
    for step in ts:
        _check_step(schedule, int(step))
    abar = schedule.alpha_bar[ts - 1]
    if np.ndim(t) == 0:
        abar = abar[0]
    else:
        abar = abar.reshape((-1,) + (1,) * (m0.ndim - 1))
    return (np.sqrt(abar) * m0 + np.sqrt(1.0 - abar) * eps).astype(m0.dtype)


def noise_from_clean(schedule: NoiseSchedule, m_t: np.ndarray, m0_hat: np.ndarray,
                     t: int) -> np.ndarray:
    """Invert q_sample in its noise argument: (m_t - sqrt(abar)*m0) / sqrt(1-abar)."""
    _check_step(schedule, t)
    abar = schedule.alpha_bar_at(t)
    if 1.0 - abar < 1e-12:
        raise ValueError(f"noise_from_clean: 1 - alpha_bar({t}) below 1e-12")
    return ((m_t - np.sqrt(abar) * m0_hat) / np.sqrt(1.0 - abar)).astype(m_t.dtype)


def guided_noise(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: (1 + s) * eps_cond - s * eps_uncond."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ValueError(f"guided_noise: shapes {np.shape(eps_cond)} vs {np.shape(eps_uncond)}")
    return (1.0 + scale) * eps_cond - scale * eps_uncond


def ddpm_step(schedule: NoiseSchedule, m_t: np.ndarray, eps_hat: np.ndarray,
              t: int, rng: np.random.Generator) -> np.ndarray:
    """Stochastic reverse step t -> t-1; deterministic at t = 1."""
    _check_step(schedule, t)
    beta = schedule.beta_at(t)
    alpha = schedule.alpha_at(t)
    abar = schedule.alpha_bar_at(t)
    mean = (m_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean.astype(m_t.dtype)
    abar_prev = schedule.alpha_bar_at(t - 1)
    var = beta * (1.0 - abar_prev) / (1.0 - abar)
    z = rng.standard_normal(m_t.shape)
    return (mean + np.sqrt(var) * z).astype(m_t.dtype)


def ddim_step(schedule: NoiseSchedule, m_t: np.ndarray, eps_hat: np.ndarray,
              t: int, t_prev: int) -> np.ndarray:
    """Deterministic reverse hop t -> t_prev (t_prev may be 0, alpha_bar(0) = 1)."""
    _check_step(schedule, t)
    if not 0 <= t_prev < t:
        raise ValueError(f"ddim_step: need 0 <= t_prev < t, got ({t_prev}, {t})")
    abar = schedule.alpha_bar_at(t)
    abar_prev = schedule.alpha_bar_at(t_prev)
    m0_hat = (m_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
    return (np.sqrt(abar_prev) * m0_hat + np.sqrt(1.0 - abar_prev) * eps_hat).astype(m_t.dtype)


def sampling_steps(timesteps: int, steps: int) -> list[int]:
    """Evenly spaced descending step subsequence from T down to 1."""
    if not 1 <= steps <= timesteps:
        raise ValueError(f"steps must be in [1, {timesteps}], got {steps}")
    ts = np.unique(np.round(np.linspace(timesteps, 1, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def training_loss(model, schedule: NoiseSchedule, m0: np.ndarray, caption,
                  rng: np.random.Generator, cond_dropout: float) -> Tensor:
    """Single-sequence objective: MSE between m0 and the model's prediction.

    Draws t ~ U{1..T} and unit noise, drops the caption to the null condition
    with probability cond_dropout, in that rng order.
    """
    t = int(rng.integers(1, schedule.timesteps + 1))
    eps = rng.standard_normal(m0.shape).astype(m0.dtype)
    cond = None if rng.random() < cond_dropout else caption
    m_t = q_sample(schedule, m0, t, eps)
    pred = model(m_t, t, cond)
    target = Tensor(np.asarray(m0, dtype=pred.dtype))
    return square(target - pred).mean()


def training_loss_batch(model, schedule: NoiseSchedule, m0: np.ndarray, captions,
                        rng: np.random.Generator, cond_dropout: float) -> Tensor:
    """Batched objective over [B x L x D_m] stacks of equal-length sequences."""
    count = m0.shape[0]
    ts = rng.integers(1, schedule.timesteps + 1, size=count)
    eps = rng.standard_normal(m0.shape).astype(m0.dtype)
    drop = rng.random(count) < cond_dropout
    conds = [None if d else c for c, d in zip(captions, drop)]
    m_t = q_sample(schedule, m0, ts, eps)
    pred = model(m_t, ts, conds)
    target = Tensor(np.asarray(m0, dtype=pred.dtype))
    return square(target - pred).mean()


def _predict_noise(model, schedule, m_t, t, caption, guidance_scale, count):
    t_model = t if count is None else np.full(count, t)
    with no_grad():
        m0_cond = model(m_t, t_model, caption).numpy()
        m0_uncond = model(m_t, t_model, _null_like(caption)).numpy()
    eps_cond = noise_from_clean(schedule, m_t, m0_cond, t)
    eps_uncond = noise_from_clean(schedule, m_t, m0_uncond, t)
    return guided_noise(eps_cond, eps_uncond, guidance_scale)


def _null_like(caption):
    if isinstance(caption, (list, tuple)):
        return [None] * len(caption)
    return None


def sample_sequence(model, schedule: NoiseSchedule, caption, length: int, steps: int,
                    sampler: str, guidance_scale: float, rng: np.random.Generator,
                    normalizer=None, count: int | None = None) -> np.ndarray:
    """Reverse the chain from unit noise; returns [L x D_m] (or [B x L x D_m]).

    Both the conditioned and null-conditioned predictions are computed at each
    of the evenly spaced schedule points, converted to noise, combined with
    classifier-free guidance, and advanced with the chosen sampler. The result
    is denormalized when a normalizer is given.
    """
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler {sampler!r}")
    shape = (length, model.d_motion) if count is None else (count, length, model.d_motion)
    caption_arg = caption if count is None else _as_caption_list(caption, count)
    m = rng.standard_normal(shape).astype(np.float32)
    ts = sampling_steps(schedule.timesteps, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_hat = _predict_noise(model, schedule, m, t, caption_arg,
                                 guidance_scale, count)
        if sampler == "ddpm":
            m = ddpm_step(schedule, m, eps_hat, t, rng)
        else:
            m = ddim_step(schedule, m, eps_hat, t, t_prev)
    if normalizer is not None:
        m = normalizer.denormalize(m)
    return m


def _as_caption_list(caption, count):
    if isinstance(caption, (list, tuple)):
        if len(caption) != count:
            raise ValueError(f"{len(caption)} captions for {count} samples")
        return list(caption)
    return [caption] * count

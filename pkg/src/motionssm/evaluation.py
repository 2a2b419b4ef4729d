"""Evaluation: Fréchet distance on hand-crafted sequence features, plus the
fraction of generated sequences whose threshold-classifier label matches the
conditioning caption.
"""

from __future__ import annotations

import numpy as np

from .data import MotionSample, classify_frames
from .diffusion import NoiseSchedule, sample_sequence
from .rng import stream_rng


def sequence_features(frames: np.ndarray) -> np.ndarray:
    """16-dim feature vector: per-channel mean and per-channel std."""
    frames = np.asarray(frames, dtype=np.float64)
    return np.concatenate([frames.mean(axis=0), frames.std(axis=0)])


def _sqrtm_trace(sigma1: np.ndarray, sigma2: np.ndarray) -> float:
    """tr((sigma1 sigma2)^(1/2)) via the symmetrized product, eigenvalues clamped at 0."""
    w1, v1 = np.linalg.eigh(sigma1)
    root1 = (v1 * np.sqrt(np.clip(w1, 0.0, None))) @ v1.T
    inner = root1 @ sigma2 @ root1
    inner = (inner + inner.T) / 2.0
    w = np.linalg.eigh(inner)[0]
    return float(np.sum(np.sqrt(np.clip(w, 0.0, None))))


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray,
                     regularization: float = 1e-6) -> float:
    """Squared Fréchet distance between Gaussians fit to two feature sets."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    eye = regularization * np.eye(a.shape[1])
    sigma_a = np.cov(a, rowvar=False) + eye
    sigma_b = np.cov(b, rowvar=False) + eye
    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    trace_term = float(np.trace(sigma_a) + np.trace(sigma_b)) - 2.0 * _sqrtm_trace(sigma_a, sigma_b)
    return mean_term + trace_term


def generate_for_split(model, schedule: NoiseSchedule, normalizer,
                       samples: list[MotionSample], steps: int, sampler: str,
                       guidance_scale: float, seed: int) -> list[np.ndarray]:
    """One generated sequence per (caption, length) pair of the split, batched by length."""
    rng = stream_rng(seed, "eval")
    by_length: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_length.setdefault(s.length, []).append(i)
    generated: list[np.ndarray | None] = [None] * len(samples)
    for length in sorted(by_length):
        indices = by_length[length]
        captions = [samples[i].caption_id for i in indices]
        batch = sample_sequence(model, schedule, captions, length, steps, sampler,
                                guidance_scale, rng, normalizer=normalizer,
                                count=len(indices))
        for j, i in enumerate(indices):
            generated[i] = batch[j]
    return generated


def evaluate_model(model, schedule: NoiseSchedule, normalizer,
                   samples: list[MotionSample], steps: int, sampler: str,
                   guidance_scale: float, seed: int = 0) -> dict:
    """Returns {"toy_fid": ..., "cond_acc": ..., "n": ...} for the split."""
    generated = generate_for_split(model, schedule, normalizer, samples, steps,
                                   sampler, guidance_scale, seed)
    real_features = np.stack([sequence_features(s.frames) for s in samples])
    fake_features = np.stack([sequence_features(g) for g in generated])
    hits = sum(classify_frames(g) == s.caption_id for g, s in zip(generated, samples))
    return {
        "toy_fid": frechet_distance(real_features, fake_features),
        "cond_acc": hits / len(samples),
        "n": len(samples),
    }

"""Synthetic text-motion corpus: parametric trajectories paired with caption ids.

Each frame is an 8-channel pose feature vector: forward velocity, lateral
velocity, yaw rate, root height, and four limb-phase channels. The eight
caption classes have linearly separable channel statistics so a threshold
classifier on per-channel means recovers the caption, which makes
conditional-generation quality measurable without a learned evaluator.

On disk a corpus is a directory with one manifest per split (lines of
"id caption length seed") and one raw little-endian float32 blob per
sequence, row-major by frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CAPTIONS = ("stand", "walk-forward", "walk-backward", "turn-left",
            "turn-right", "circle", "zigzag", "jump")
NUM_CHANNELS = 8
CH_FORWARD, CH_LATERAL, CH_YAW, CH_HEIGHT = 0, 1, 2, 3
BASE_HEIGHT = 0.9
JITTER_SIGMA = 0.05
LENGTH_CHOICES = (16, 24, 32, 40, 48, 56, 64)
SPLIT_SEED_BASE = {"train": 0, "valid": 1_000_000, "test": 2_000_000}

# per class: (forward, lateral, yaw, jump pulse amplitude, limb amplitude)
_SIGNATURES = {
    0: (0.0, 0.0, 0.0, 0.0, 0.0),
    1: (1.0, 0.0, 0.0, 0.0, 0.5),
    2: (-1.0, 0.0, 0.0, 0.0, 0.5),
    3: (0.3, 0.0, 1.0, 0.0, 0.3),
    4: (0.3, 0.0, -1.0, 0.0, 0.3),
    5: (0.3, 1.0, 0.3, 0.0, 0.4),
    6: (0.3, -1.0, 0.0, 0.0, 0.4),
    7: (0.0, 0.0, 0.0, 2.0, 0.2),
}


@dataclass
class MotionSample:
    uid: str
    caption_id: int
    length: int
    seed: int
    frames: np.ndarray  # [L x 8] float32


def caption_id(name: str) -> int:
    try:
        return CAPTIONS.index(name)
    except ValueError:
        raise ValueError(f"unknown caption {name!r}; choices: {', '.join(CAPTIONS)}") from None


def generate_motion(caption: int, length: int, seed: int) -> np.ndarray:
    """Deterministic class-characteristic trajectory plus Gaussian jitter."""
    if not 0 <= caption < len(CAPTIONS):
        raise ValueError(f"caption id {caption} out of range [0, {len(CAPTIONS)})")
    if length < 1:
        raise ValueError(f"length must be positive, got {length}")
    forward, lateral, yaw, pulse_amp, limb_amp = _SIGNATURES[caption]
    frames = np.zeros((length, NUM_CHANNELS), dtype=np.float64)
    frames[:, CH_FORWARD] = forward
    frames[:, CH_LATERAL] = lateral
    frames[:, CH_YAW] = yaw
    frames[:, CH_HEIGHT] = BASE_HEIGHT
    if pulse_amp:
        # half-sine height pulse over the middle third of the sequence
        lo, hi = length // 3, max(length // 3 + 1, 2 * length // 3)
        span = np.arange(lo, hi)
        frames[span, CH_HEIGHT] += pulse_amp * np.sin(np.pi * (span - lo) / max(hi - lo, 1))
    if limb_amp:
        idx = np.arange(length)
        gait = 2.0 * np.pi * idx / 16.0  # fixed gait period of 16 frames
        for limb in range(4):
            frames[:, 4 + limb] = limb_amp * np.sin(gait + limb * np.pi / 2.0)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    frames += rng.normal(0.0, JITTER_SIGMA, size=frames.shape)
    return frames.astype(np.float32)


def classify_frames(frames: np.ndarray) -> int:
    """Threshold classifier on per-channel means; inverts the class signatures."""
    m = np.asarray(frames, dtype=np.float64).mean(axis=0)
    if m[CH_HEIGHT] - BASE_HEIGHT > 0.2:
        return 7
    if m[CH_LATERAL] > 0.5:
        return 5
    if m[CH_LATERAL] < -0.5:
        return 6
    if m[CH_YAW] > 0.5:
        return 3
    if m[CH_YAW] < -0.5:
        return 4
    if m[CH_FORWARD] > 0.5:
        return 1
    if m[CH_FORWARD] < -0.5:
        return 2
    return 0


def build_corpus(train_count: int = 1600, valid_count: int = 200, test_count: int = 200,
                 master_seed: int = 0, min_len: int = 16, max_len: int = 64
                 ) -> dict[str, list[MotionSample]]:
    """Balanced splits with disjoint per-sequence seed ranges."""
    counts = {"train": train_count, "valid": valid_count, "test": test_count}
    lengths = [l for l in LENGTH_CHOICES if min_len <= l <= max_len]
    if not lengths:
        raise ValueError(f"no allowed lengths inside [{min_len}, {max_len}]")
    corpus = {}
    for split, count in counts.items():
        if count < 1:
            raise ValueError(f"{split} count must be >= 1")
        base = SPLIT_SEED_BASE[split] + master_seed * 3_000_000
        length_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([master_seed, base])))
        samples = []
        for i in range(count):
            cap = i % len(CAPTIONS)
            length = int(length_rng.choice(lengths))
            seed = base + i
            samples.append(MotionSample(
                uid=f"{split}_{i:05d}", caption_id=cap, length=length, seed=seed,
                frames=generate_motion(cap, length, seed)))
        corpus[split] = samples
    return corpus


class Normalizer:
    """Per-channel z-scoring with statistics fitted on the training split."""

    def __init__(self, mean: np.ndarray | None = None, std: np.ndarray | None = None):
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def fit(self, samples: list[MotionSample]) -> "Normalizer":
        stacked = np.concatenate([s.frames for s in samples], axis=0).astype(np.float64)
        self.mean = stacked.mean(axis=0)
        self.std = np.maximum(stacked.std(axis=0), 1e-6)
        return self

    def _require_fit(self):
        if not self.fitted:
            raise RuntimeError("normalizer used before fitting")

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        self._require_fit()
        return ((frames - self.mean) / self.std).astype(np.float32)

    def denormalize(self, frames: np.ndarray) -> np.ndarray:
        self._require_fit()
        return (frames * self.std + self.mean).astype(np.float32)


def save_motion_blob(path: Path, frames: np.ndarray):
    np.asarray(frames, dtype="<f4").tofile(path)


def load_motion_blob(path: Path, length: int) -> np.ndarray:
    frames = np.fromfile(path, dtype="<f4")
    if frames.size != length * NUM_CHANNELS:
        raise ValueError(f"{path}: expected {length * NUM_CHANNELS} floats, found {frames.size}")
    return frames.reshape(length, NUM_CHANNELS)


def save_corpus(directory, corpus: dict[str, list[MotionSample]]):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, samples in corpus.items():
        lines = []
        for s in samples:
            lines.append(f"{s.uid} {CAPTIONS[s.caption_id]} {s.length} {s.seed}")
            save_motion_blob(directory / f"{s.uid}.f32", s.frames)
        (directory / f"{split}.txt").write_text("\n".join(lines) + "\n")


def load_corpus(directory) -> dict[str, list[MotionSample]]:
    directory = Path(directory)
    corpus = {}
    for split in ("train", "valid", "test"):
        manifest = directory / f"{split}.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"missing manifest {manifest}")
        samples = []
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            uid, caption, length, seed = line.split()
            length = int(length)
            samples.append(MotionSample(
                uid=uid, caption_id=caption_id(caption), length=length, seed=int(seed),
                frames=load_motion_blob(directory / f"{uid}.f32", length)))
        corpus[split] = samples
    return corpus

"""Training loop: AdamW with cosine learning-rate decay, metrics CSV, best-val
checkpoint selection.

Sequences are bucketed by length so each step runs one batched graph. All
stochastic draws come from named counter-based streams, and validation uses a
set of (step, noise, dropout) draws frozen at startup, so a fixed master seed
reproduces the metrics file bit for bit.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .blocks import MotionDenoiser
from .checkpoint import model_from_config, save_checkpoint
from .config import RunConfig
from .data import MotionSample, Normalizer, build_corpus, load_corpus
from .diffusion import NoiseSchedule, build_schedule, q_sample, training_loss_batch
from .layers import Module
from .rng import stream_rng
from .tensor import backward, no_grad, set_checked

METRICS_HEADER = "epoch,train_loss,valid_loss,lr"


class AdamW(Module):
    """Decoupled weight decay over a model's named parameters."""

    def __init__(self, model: Module, beta1: float = 0.9, beta2: float = 0.999,
                 weight_decay: float = 1e-2, eps: float = 1e-8):
        self._params = list(model.named_parameters())
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self._params}
        self._v = {name: np.zeros_like(p.data) for name, p in self._params}

    def step(self, lr: float):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, p in self._params:
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name] = b1 * self._m[name] + (1.0 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = (p.data - lr * (update + self.weight_decay * p.data)).astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self._params:
            p.grad = None


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


def _length_buckets(samples: list[MotionSample]) -> dict[int, list[int]]:
    buckets: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        buckets.setdefault(s.length, []).append(i)
    return {length: buckets[length] for length in sorted(buckets)}


def _grad_norms(model: MotionDenoiser, worst: int = 5) -> list[tuple[str, float]]:
    norms = [(name, float(np.linalg.norm(p.grad))) for name, p in model.named_parameters()
             if p.grad is not None]
    return sorted(norms, key=lambda kv: -kv[1])[:worst]


def _frozen_validation(samples, schedule, normalizer, cond_dropout, rng,
                       batch_size: int):
    """Batches of (m0, m_t, t, cond) with draws fixed once, so the validation
    loss is comparable across epochs and bit-reproducible."""
    batches = []
    by_length: dict[int, list[MotionSample]] = {}
    for s in samples:
        by_length.setdefault(s.length, []).append(s)
    for length in sorted(by_length):
        group = by_length[length]
        for lo in range(0, len(group), batch_size):
            chunk = group[lo:lo + batch_size]
            m0 = np.stack([normalizer.normalize(s.frames) for s in chunk])
            ts = rng.integers(1, schedule.timesteps + 1, size=len(chunk))
            eps = rng.standard_normal(m0.shape).astype(np.float32)
            drop = rng.random(len(chunk)) < cond_dropout
            conds = [None if d else s.caption_id for s, d in zip(chunk, drop)]
            batches.append((m0, q_sample(schedule, m0, ts, eps), ts, conds))
    return batches


def _validation_loss(model, frozen_batches) -> float:
    total = 0.0
    count = 0
    with no_grad():
        for m0, m_t, ts, conds in frozen_batches:
            pred = model(m_t, ts, conds).numpy()
            total += float(np.sum(np.mean((m0 - pred) ** 2, axis=(1, 2))))
            count += m0.shape[0]
    return total / count


def train(cfg: RunConfig, out_dir, corpus_dir=None, log=print) -> Path:
    """Run the full loop; returns the checkpoint directory (best validation loss)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_checked(cfg.checked)

    if corpus_dir is not None:
        corpus = load_corpus(corpus_dir)
    else:
        corpus = build_corpus(cfg.train_count, cfg.valid_count, cfg.test_count,
                              master_seed=cfg.seed, min_len=cfg.min_len,
                              max_len=cfg.max_len)
    train_set, valid_set = corpus["train"], corpus["valid"]
    normalizer = Normalizer().fit(train_set)
    normalized = {s.uid: normalizer.normalize(s.frames) for s in train_set}

    schedule = build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    model = model_from_config(cfg)
    optimizer = AdamW(model, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                      weight_decay=cfg.weight_decay)
    train_rng = stream_rng(cfg.seed, "train")
    frozen_valid = _frozen_validation(valid_set, schedule, normalizer,
                                      cfg.cond_dropout, stream_rng(cfg.seed, "valid"),
                                      cfg.batch_size)

    buckets = _length_buckets(train_set)
    metrics_lines = [METRICS_HEADER]
    best_valid = math.inf
    ckpt_dir = out_dir / "checkpoint"
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        batches = []
        for length, indices in buckets.items():
            order = train_rng.permutation(len(indices))
            shuffled = [indices[j] for j in order]
            for lo in range(0, len(shuffled), cfg.batch_size):
                batches.append(shuffled[lo:lo + cfg.batch_size])
        batches = [batches[i] for i in train_rng.permutation(len(batches))]

        epoch_loss = 0.0
        epoch_items = 0
        for batch in batches:
            items = [train_set[i] for i in batch]
            m0 = np.stack([normalized[s.uid] for s in items])
            captions = [s.caption_id for s in items]
            loss = training_loss_batch(model, schedule, m0, captions, train_rng,
                                       cfg.cond_dropout)
            value = loss.item()
            optimizer.zero_grad()
            if not math.isfinite(value):
                try:
                    backward(loss)
                except FloatingPointError:
                    pass
                dump = ", ".join(f"{n}={v:.3e}" for n, v in _grad_norms(model))
                raise RuntimeError(
                    f"non-finite loss {value} at step {step} (epoch {epoch}, lr {lr:.3e}); "
                    f"largest grad norms: {dump or 'unavailable'}")
            backward(loss)
            optimizer.step(lr)
            epoch_loss += value * len(items)
            epoch_items += len(items)
            step += 1

        train_loss = epoch_loss / epoch_items
        valid_loss = _validation_loss(model, frozen_valid)
        metrics_lines.append(f"{epoch},{train_loss:.8e},{valid_loss:.8e},{lr:.8e}")
        if valid_loss < best_valid:
            best_valid = valid_loss
            save_checkpoint(ckpt_dir, model, cfg, normalizer)
        if log is not None and (epoch % 10 == 0 or epoch == cfg.epochs - 1):
            log(f"epoch {epoch:4d}  train {train_loss:.4f}  valid {valid_loss:.4f}  lr {lr:.2e}")

    (out_dir / "metrics.csv").write_text("\n".join(metrics_lines) + "\n")
    return ckpt_dir

"""Trainable layers: linear maps, 1-D convolutions, group normalization, embeddings.

Weight matrices are stored [out_dim x in_dim]. Weights initialize from
uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases to zero, norm affines to
identity, embedding rows from normal(0, 0.02).
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import (
    Tensor, ShapeError, as_tensor, broadcast_to, concat, exp, log, matmul,
    reshape, silu, slice_axis, square, swap_last_axes,
)


class Module:
    """Minimal parameter container; children discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(f"{prefix}{name}", value)

    def parameters(self) -> Iterator[Tensor]:
        for _, p in self.named_parameters():
            yield p

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def cast_(self, dtype) -> "Module":
        """Cast all parameters in place (used to switch to float64 for checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _walk(name, value):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(data) -> Tensor:
    from .tensor import default_dtype
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True)


class Linear(Module):
    """Affine map on the trailing dimension; weight is [out_dim x in_dim]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = _param(_uniform_init(rng, (out_dim, in_dim), in_dim))
        self.bias = _param(np.zeros(out_dim)) if bias else None

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear: trailing dim {x.shape[-1]} != in_dim {self.in_dim}")
        squeeze = x.ndim == 1
        if squeeze:
            x = reshape(x, (1, self.in_dim))
        y = matmul(x, swap_last_axes(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return reshape(y, (self.out_dim,)) if squeeze else y

    def channels(self, x) -> Tensor:
        """Apply along the channel axis of [..., in_dim, L] data."""
        x = as_tensor(x)
        if x.shape[-2] != self.in_dim:
            raise ShapeError(f"linear: channel dim {x.shape[-2]} != in_dim {self.in_dim}")
        y = matmul(self.weight, x)
        if self.bias is not None:
            b = broadcast_to(reshape(self.bias, (self.out_dim, 1)), y.shape)
            y = y + b
        return y


class DepthwiseConv1d(Module):
    """Per-channel 3-tap convolution over [..., channels, L], zero padding 1."""

    def __init__(self, channels: int, rng: np.random.Generator, kernel_size: int = 3):
        self.channels = channels
        self.kernel_size = kernel_size
        self.kernel = _param(_uniform_init(rng, (channels, kernel_size), kernel_size))
        self.bias = _param(np.zeros(channels))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-2] != self.channels:
            raise ShapeError(f"depthwise conv: {x.shape[-2]} channels, kernel has {self.channels}")
        length = x.shape[-1]
        pad = (self.kernel_size - 1) // 2
        zeros = Tensor(np.zeros(x.shape[:-1] + (pad,), dtype=x.dtype))
        padded = concat([zeros, x, zeros], axis=-1)
        taps = None
        for j in range(self.kernel_size):
            window = slice_axis(padded, axis=-1, start=j, stop=j + length)
            k_j = broadcast_to(slice_axis(self.kernel, axis=1, start=j, stop=j + 1), window.shape)
            term = window * k_j
            taps = term if taps is None else taps + term
        return taps + broadcast_to(reshape(self.bias, (self.channels, 1)), taps.shape)


class PointwiseConv1d(Module):
    """Kernel-1 convolution over [..., in_ch, L]; stride S keeps frames 0, S, 2S, ...

    For stride > 1 the tail is replicate-padded to a multiple of S first, so
    the output length is ceil(L / S).
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stride = stride
        self.weight = _param(_uniform_init(rng, (out_ch, in_ch), in_ch))
        self.bias = _param(np.zeros(out_ch)) if bias else None

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-2] != self.in_ch:
            raise ShapeError(f"pointwise conv: {x.shape[-2]} channels != in_ch {self.in_ch}")
        if self.stride > 1:
            length = x.shape[-1]
            remainder = (-length) % self.stride
            if remainder:
                last = slice_axis(x, axis=-1, start=length - 1, stop=length)
                fill = broadcast_to(last, x.shape[:-1] + (remainder,))
                x = concat([x, fill], axis=-1)
            x = slice_axis(x, axis=-1, step=self.stride)
        y = matmul(self.weight, x)
        if self.bias is not None:
            y = y + broadcast_to(reshape(self.bias, (self.out_ch, 1)), y.shape)
        return y


class GroupNorm(Module):
    """Per-frame group normalization: statistics over in-group channels only.

    Statistics are computed independently at every frame so the layer adds no
    cross-frame coupling; the residual conv blocks built on it keep an exact
    radius-1 receptive field.
    """

    def __init__(self, channels: int, num_groups: int = 16, eps: float = 1e-5):
        if channels % num_groups:
            raise ShapeError(f"group norm: {channels} channels not divisible by {num_groups} groups")
        self.channels = channels
        self.num_groups = num_groups
        self.eps = eps
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-2] != self.channels:
            raise ShapeError(f"group norm: {x.shape[-2]} channels, expected {self.channels}")
        lead = x.shape[:-2]
        length = x.shape[-1]
        per = self.channels // self.num_groups
        grouped = reshape(x, lead + (self.num_groups, per, length))
        mu = grouped.mean(axis=-2, keepdims=True)
        centered = grouped - broadcast_to(mu, grouped.shape)
        var = square(centered).mean(axis=-2, keepdims=True)
        # rsqrt(var + eps) composed from log/exp; the primitive set has no division
        rstd = exp(log(var + self.eps) * -0.5)
        normed = centered * broadcast_to(rstd, grouped.shape)
        normed = reshape(normed, x.shape)
        g = broadcast_to(reshape(self.gamma, (self.channels, 1)), normed.shape)
        b = broadcast_to(reshape(self.beta, (self.channels, 1)), normed.shape)
        return normed * g + b


class EmbeddingTable(Module):
    """Trainable lookup rows; the final row is the learned null condition."""

    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        self.vocab = vocab
        self.dim = dim
        self.rows = _param(rng.normal(0.0, 0.02, size=(vocab + 1, dim)))
        self.null_index = vocab

    def lookup(self, index: int | None) -> Tensor:
        i = self.null_index if index is None else int(index)
        if not 0 <= i <= self.null_index:
            raise IndexError(f"embedding: id {i} out of range [0, {self.null_index}]")
        return reshape(slice_axis(self.rows, axis=0, start=i, stop=i + 1), (self.dim,))

    def lookup_many(self, indices) -> Tensor:
        resolved = []
        for i in indices:
            if i is None:
                resolved.append(self.null_index)
            elif 0 <= int(i) < self.vocab:
                resolved.append(int(i))
            else:
                raise IndexError(f"embedding: id {i} out of range [0, {self.vocab})")
        rows = [slice_axis(self.rows, axis=0, start=i, stop=i + 1) for i in resolved]
        return concat(rows, axis=0)


def sinusoidal_encoding(t, dim: int, base: float = 10000.0) -> np.ndarray:
    """Position encoding: first half sines, second half cosines; t may be an array."""
    if dim % 2:
        raise ShapeError(f"sinusoidal encoding needs even dim, got {dim}")
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None] * freqs[None, :]
    enc = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return enc[0] if np.isscalar(t) or np.ndim(t) == 0 else enc


class TimeEmbed(Module):
    """Sinusoidal step encoding followed by a two-layer perceptron."""

    def __init__(self, dim: int, max_step: int, rng: np.random.Generator):
        self.dim = dim
        self.max_step = max_step
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def __call__(self, t) -> Tensor:
        steps = np.atleast_1d(np.asarray(t))
        if np.any(steps < 0) or np.any(steps > self.max_step):
            raise ValueError(f"timestep {t} out of range [0, {self.max_step}]")
        enc = sinusoidal_encoding(t, self.dim)
        x = Tensor(np.asarray(enc, dtype=self.fc1.weight.dtype))
        return self.fc2(silu(self.fc1(x)))

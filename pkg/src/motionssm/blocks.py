"""Denoiser building blocks and the assembled network.

The network maps a noisy [L x D_m] motion, a diffusion step and a caption id
to a prediction of the clean motion. Per block the layout is local-global-
local: two residual convolution blocks with a radius-1 receptive field around
a module that downsamples frames into segments, gates text into each segment,
scans the segments with the mirror-mode selective SSM, upsamples by repeating
each segment, and fuses with the untouched sequence.
"""

from __future__ import annotations

import numpy as np

from .layers import (
    DepthwiseConv1d, EmbeddingTable, GroupNorm, Linear, Module, PointwiseConv1d,
    TimeEmbed,
)
from .ssm import MambaBlock, ScanMode
from .tensor import (
    Tensor, ShapeError, as_tensor, broadcast_to, concat, relu, reshape,
    sigmoid, slice_axis, swap_last_axes,
)


class LocalConvBlock(Module):
    """x + ReLU(Norm(pointwise(depthwise(x)))) over [..., D, L]; radius-1 locality."""

    def __init__(self, channels: int, rng: np.random.Generator, groups: int = 16):
        self.depthwise = DepthwiseConv1d(channels, rng, kernel_size=3)
        self.pointwise = PointwiseConv1d(channels, channels, rng, stride=1)
        self.norm = GroupNorm(channels, num_groups=groups)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        return x + relu(self.norm(self.pointwise(self.depthwise(x))))


class TextInjector(Module):
    """Sigmoid-gated channel reweighting of a text token, fused into a segment."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.gate = Linear(2 * dim, dim, rng)
        self.fuse = Linear(2 * dim, dim, rng)

    def __call__(self, segment: Tensor, text: Tensor) -> Tensor:
        """Vector form: segment [..., D], text [..., D] -> [..., D]."""
        pair = concat([segment, text], axis=-1)
        weighted = sigmoid(self.gate(pair)) * text
        return self.fuse(concat([segment, weighted], axis=-1))

    def inject(self, segments: Tensor, text: Tensor) -> Tensor:
        """Channels-major form: segments [..., D, L'], text [..., D]."""
        count = segments.shape[-1]
        text_col = broadcast_to(reshape(text, text.shape + (1,)), text.shape + (count,))
        pair = concat([segments, text_col], axis=-2)
        gate = sigmoid(self.gate.channels(pair))
        weighted = gate * text_col
        return self.fuse.channels(concat([segments, weighted], axis=-2))


class GlobalTextBlock(Module):
    """Downsample -> inject text per segment -> global scan -> upsample and fuse."""

    def __init__(self, dim: int, stride: int, rng: np.random.Generator,
                 scan_mode: ScanMode = ScanMode.MIRROR, d_state: int = 16,
                 d_conv: int = 4, expand: int = 2):
        self.dim = dim
        self.stride = stride
        self.scan_mode = ScanMode(scan_mode)
        self.down = PointwiseConv1d(dim, dim, rng, stride=stride)
        self.injector = TextInjector(dim, rng)
        self.mixer = MambaBlock(dim, rng, d_state=d_state, d_conv=d_conv, expand=expand,
                                bidirectional=self.scan_mode is ScanMode.BIDIR)
        self.fuse = Linear(dim, dim, rng)

    def downsample(self, x: Tensor) -> Tensor:
        return self.down(x)

    def upsample_and_fuse(self, x_orig: Tensor, segments: Tensor) -> Tensor:
        length = x_orig.shape[-1]
        count = segments.shape[-1]
        if count != -(-length // self.stride):
            raise ShapeError(f"upsample: {count} segments for length {length} "
                             f"(stride {self.stride})")
        lead = segments.shape[:-1]
        repeated = broadcast_to(reshape(segments, lead + (count, 1)),
                                lead + (count, self.stride))
        repeated = reshape(repeated, lead + (count * self.stride,))
        repeated = slice_axis(repeated, axis=-1, start=0, stop=length)
        return self.fuse.channels(x_orig + repeated)

    def __call__(self, x: Tensor, text: Tensor) -> Tensor:
        segments = self.downsample(as_tensor(x))
        segments = self.injector.inject(segments, text)
        scanned = swap_last_axes(self.mixer(swap_last_axes(segments), self.scan_mode))
        return self.upsample_and_fuse(x, scanned)


class _Block(Module):
    def __init__(self, dim, stride, rng, scan_mode, groups, d_state, d_conv, expand):
        self.local_a = LocalConvBlock(dim, rng, groups=groups)
        self.global_mix = GlobalTextBlock(dim, stride, rng, scan_mode=scan_mode,
                                          d_state=d_state, d_conv=d_conv, expand=expand)
        self.local_b = LocalConvBlock(dim, rng, groups=groups)

    def __call__(self, x, text):
        return self.local_b(self.global_mix(self.local_a(x), text))


class MotionDenoiser(Module):
    """The full clean-motion predictor phi(m_t, t, caption)."""

    def __init__(self, d_motion: int, d_model: int, n_blocks: int, stride: int,
                 timesteps: int, vocab: int, rng: np.random.Generator,
                 scan_mode: ScanMode = ScanMode.MIRROR, groups: int = 16,
                 d_state: int = 16, d_conv: int = 4, expand: int = 2):
        self.d_motion = d_motion
        self.d_model = d_model
        self.timesteps = timesteps
        self.scan_mode = ScanMode(scan_mode)
        self.motion_embed = Linear(d_motion, d_model, rng)
        self.time_embed = TimeEmbed(d_model, timesteps, rng)
        self.text_table = EmbeddingTable(vocab, d_model, rng)
        self.blocks = [
            _Block(d_model, stride, rng, self.scan_mode, groups, d_state, d_conv, expand)
            for _ in range(n_blocks)
        ]
        self.out_proj = Linear(d_model, d_motion, rng)

    def __call__(self, m_t, t, caption) -> Tensor:
        """m_t: [L x D_m] or [B x L x D_m]; t: step or per-item steps; caption:
        id, None for the null condition, or a per-item sequence of those."""
        x = as_tensor(m_t, dtype=self.motion_embed.weight.dtype)
        if x.shape[-1] != self.d_motion:
            raise ShapeError(f"denoiser: pose dim {x.shape[-1]} != {self.d_motion}")
        batched = x.ndim == 3
        steps = np.atleast_1d(np.asarray(t))
        if np.any(steps < 1) or np.any(steps > self.timesteps):
            raise ValueError(f"diffusion step {t} out of range [1, {self.timesteps}]")

        h = self.motion_embed(x)
        temb = self.time_embed(t)
        if batched:
            if temb.ndim == 1:
                temb = reshape(temb, (1, 1, self.d_model))
            else:
                temb = reshape(temb, (temb.shape[0], 1, self.d_model))
            h = h + broadcast_to(temb, h.shape)
        else:
            h = h + temb

        if batched and isinstance(caption, (list, tuple, np.ndarray)):
            text = self.text_table.lookup_many(list(caption))
        elif isinstance(caption, (list, tuple, np.ndarray)):
            raise ShapeError("per-item captions passed with a single sequence")
        else:
            text = self.text_table.lookup(caption)

        h = swap_last_axes(h)
        for block in self.blocks:
            h = block(h, text)
        h = swap_last_axes(h)
        return self.out_proj(h)

"""Selective state-space scan block with three directional strategies.

The block follows the reference selective-scan formulation: input projection
into a scan branch and a gate branch, a causal depthwise convolution, data
dependent (delta, B, C) projections, zero-order-hold discretization of a
diagonal negative state matrix, an O(L) sequential recurrence, gating with
SiLU, and an output projection.

Scan modes over a [L x D] sequence:
  FORWARD  one causal left-to-right scan.
  BIDIR    forward branch plus a second, independently parameterized branch
           run on the reversed sequence; branch outputs are summed. The
           in/out projections and gate are shared.
  MIRROR   the sequence is prefixed with its own reversal, the 2L-long
           result is scanned once with the FORWARD parameters, and the last
           L outputs are kept. Every kept position sees both directions at
           zero extra parameter cost.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from .layers import Linear, Module, _param, _uniform_init
from .tensor import (
    Tensor, ShapeError, as_tensor, broadcast_to, concat, exp, matmul,
    reshape, silu, slice_axis, softplus, reverse,
)
from . import tensor as T


class ScanMode(str, Enum):
    FORWARD = "forward"
    BIDIR = "bidir"
    MIRROR = "mirror"


def discretize(a_mat: Tensor, b_proj: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization: Abar = exp(delta*A), Bbar = delta*B.

    a_mat: [d_inner x n] (negative), b_proj: [..., L, n], delta: [..., L, d_inner]
    (positive). Returns [..., L, d_inner, n] pairs.
    """
    if T._ctx.checked and not (delta.data > 0).all():
        raise FloatingPointError("discretize: non-positive delta in checked mode")
    lead = delta.shape[:-2]
    length, d_inner = delta.shape[-2], delta.shape[-1]
    n = a_mat.shape[-1]
    full = lead + (length, d_inner, n)
    delta_e = broadcast_to(reshape(delta, lead + (length, d_inner, 1)), full)
    a_e = broadcast_to(a_mat, full)
    abar = exp(delta_e * a_e)
    b_e = broadcast_to(reshape(b_proj, lead + (length, 1, n)), full)
    bbar = delta_e * b_e
    return abar, bbar


def selective_scan(abar: Tensor, bbar: Tensor, c_proj: Tensor,
                   skip: Tensor, u: Tensor) -> Tensor:
    """Run h_t = Abar_t h_{t-1} + Bbar_t u_t, y_t = C_t . h_t + skip * u_t.

    abar, bbar: [..., L, d_inner, n]; c_proj: [..., L, n]; u: [..., L, d_inner];
    skip: [d_inner]. h starts at zero; output matches u's shape, and y_t
    depends only on u_{1..t}.
    """
    if abar.shape != bbar.shape:
        raise ShapeError(f"selective_scan: Abar {abar.shape} != Bbar {bbar.shape}")
    lead = u.shape[:-2]
    length, d_inner = u.shape[-2], u.shape[-1]
    n = abar.shape[-1]
    if abar.shape[-3] != length or c_proj.shape[-2] != length:
        raise ShapeError(f"selective_scan: length mismatch across arguments "
                         f"({abar.shape[-3]}, {c_proj.shape[-2]}, {length})")
    state_shape = lead + (d_inner, n)
    bu = bbar * broadcast_to(reshape(u, lead + (length, d_inner, 1)), bbar.shape)
    h = Tensor(np.zeros(state_shape, dtype=u.dtype))
    outputs = []
    for t in range(length):
        a_t = reshape(slice_axis(abar, axis=-3, start=t, stop=t + 1), state_shape)
        bu_t = reshape(slice_axis(bu, axis=-3, start=t, stop=t + 1), state_shape)
        h = a_t * h + bu_t
        c_t = reshape(slice_axis(c_proj, axis=-2, start=t, stop=t + 1), lead + (1, n))
        y_t = (h * broadcast_to(c_t, state_shape)).sum(axis=-1)
        outputs.append(reshape(y_t, lead + (1, d_inner)))
    y = concat(outputs, axis=-2)
    return y + u * skip


class _ScanParams(Module):
    """Per-direction scan internals: causal conv, delta/B/C projections, state."""

    def __init__(self, d_inner: int, d_state: int, d_conv: int, dt_rank: int,
                 rng: np.random.Generator):
        self.d_inner = d_inner
        self.d_state = d_state
        self.d_conv = d_conv
        self.dt_rank = dt_rank
        self.conv_kernel = _param(_uniform_init(rng, (d_inner, d_conv), d_conv))
        self.conv_bias = _param(np.zeros(d_inner))
        self.x_proj = Linear(d_inner, dt_rank + 2 * d_state, rng, bias=False)
        self.dt_proj = Linear(dt_rank, d_inner, rng, bias=True)
        # softplus(dt_bias) lands in [0.01, 0.1] so early scans neither freeze nor blow up
        dt = np.exp(rng.uniform(math.log(1e-2), math.log(1e-1), size=d_inner))
        self.dt_proj.bias.data[:] = dt + np.log(-np.expm1(-dt))
        self.a_log = _param(np.tile(np.log(np.arange(1, d_state + 1.0)), (d_inner, 1)))
        self.skip = _param(np.ones(d_inner))

    def causal_conv(self, u: Tensor) -> Tensor:
        """Depthwise width-d_conv conv over [..., L, d_inner] with left-only padding."""
        lead = u.shape[:-2]
        length = u.shape[-2]
        pad = Tensor(np.zeros(lead + (self.d_conv - 1, self.d_inner), dtype=u.dtype))
        padded = concat([pad, u], axis=-2)
        out = None
        for j in range(self.d_conv):
            window = slice_axis(padded, axis=-2, start=j, stop=j + length)
            k_j = reshape(slice_axis(self.conv_kernel, axis=1, start=j, stop=j + 1),
                          (self.d_inner,))
            term = window * k_j
            out = term if out is None else out + term
        return out + self.conv_bias

    def __call__(self, u: Tensor) -> Tensor:
        u = silu(self.causal_conv(u))
        projected = self.x_proj(u)
        dt_in = slice_axis(projected, axis=-1, start=0, stop=self.dt_rank)
        b_proj = slice_axis(projected, axis=-1, start=self.dt_rank,
                            stop=self.dt_rank + self.d_state)
        c_proj = slice_axis(projected, axis=-1, start=self.dt_rank + self.d_state,
                            stop=self.dt_rank + 2 * self.d_state)
        delta = softplus(self.dt_proj(dt_in))
        a_mat = -exp(self.a_log)
        abar, bbar = discretize(a_mat, b_proj, delta)
        return selective_scan(abar, bbar, c_proj, self.skip, u)


class MambaBlock(Module):
    """Selective-SSM block mapping [..., L, D] -> [..., L, D]."""

    def __init__(self, d_model: int, rng: np.random.Generator, d_state: int = 16,
                 d_conv: int = 4, expand: int = 2, dt_rank: int | None = None,
                 bidirectional: bool = False):
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.dt_rank = dt_rank if dt_rank is not None else math.ceil(d_model / 16)
        self.in_proj = Linear(d_model, 2 * self.d_inner, rng, bias=False)
        self.scan_fwd = _ScanParams(self.d_inner, d_state, d_conv, self.dt_rank, rng)
        self.scan_bwd = (_ScanParams(self.d_inner, d_state, d_conv, self.dt_rank, rng)
                         if bidirectional else None)
        self.out_proj = Linear(self.d_inner, d_model, rng, bias=False)

    def _split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        xz = self.in_proj(x)
        u = slice_axis(xz, axis=-1, start=0, stop=self.d_inner)
        z = slice_axis(xz, axis=-1, start=self.d_inner, stop=2 * self.d_inner)
        return u, z

    def __call__(self, x, mode: ScanMode = ScanMode.FORWARD) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"mamba block: trailing dim {x.shape[-1]} != {self.d_model}")
        mode = ScanMode(mode)
        if mode is ScanMode.MIRROR:
            length = x.shape[-2]
            doubled = concat([reverse(x, axis=-2), x], axis=-2)
            y = self._single(doubled)
            return slice_axis(y, axis=-2, start=length, stop=2 * length)
        if mode is ScanMode.FORWARD:
            return self._single(x)
        if self.scan_bwd is None:
            raise ValueError("bidirectional scan requested on a block built without "
                             "a second parameter set")
        u, z = self._split(x)
        y_fwd = self.scan_fwd(u)
        y_bwd = reverse(self.scan_bwd(reverse(u, axis=-2)), axis=-2)
        return self.out_proj((y_fwd + y_bwd) * silu(z))

    def _single(self, x: Tensor) -> Tensor:
        u, z = self._split(x)
        y = self.scan_fwd(u)
        return self.out_proj(y * silu(z))

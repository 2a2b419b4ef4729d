"""Dense tensors with tape-based reverse-mode automatic differentiation.

The tape is a thread-local, append-only list of recorded primitive
applications; append order is the topological order, so the backward pass
is a single reverse sweep. Kernels are numpy. float32 is the training
default, float64 is switched on for finite-difference gradient checks.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "GraphError", "PRIMITIVE_TAGS",
    "primitive_forward", "backward", "grad_check",
    "no_grad", "using_dtype", "set_default_dtype", "default_dtype",
    "set_checked", "checked_mode", "reset_tape",
    "exp", "log", "relu", "sigmoid", "silu", "softplus", "square",
    "matmul", "concat", "slice_axis", "reverse", "broadcast_to", "reshape",
    "swap_last_axes",
]

PRIMITIVE_TAGS = frozenset({
    "add", "sub", "mul", "matmul",
    "exp", "log", "relu", "sigmoid", "silu", "softplus", "square",
    "sum", "mean", "concat", "slice", "reverse", "broadcast", "reshape",
    "transpose",
})


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested primitive."""


class GraphError(RuntimeError):
    """backward() asked to run on a value the tape did not record."""


class _Node:
    __slots__ = ("op", "inputs", "out", "backward", "attrs")

    def __init__(self, op, inputs, out, backward, attrs=None):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.attrs = attrs


class _Context(threading.local):
    def __init__(self):
        self.nodes = []
        self.epoch = 0
        self.grad_enabled = True
        self.checked = False
        self.dtype = np.float32


_ctx = _Context()


def reset_tape():
    """Drop all recorded nodes; tensors produced so far can no longer backward()."""
    _ctx.nodes = []
    _ctx.epoch += 1


@contextmanager
def no_grad():
    prev = _ctx.grad_enabled
    _ctx.grad_enabled = False
    try:
        yield
    finally:
        _ctx.grad_enabled = prev


def set_default_dtype(dtype):
    _ctx.dtype = np.dtype(dtype).type


def default_dtype():
    return _ctx.dtype


@contextmanager
def using_dtype(dtype):
    prev = _ctx.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _ctx.dtype = prev


def set_checked(flag: bool):
    """Toggle NaN/Inf input rejection on every primitive (off by default)."""
    _ctx.checked = bool(flag)


@contextmanager
def checked_mode():
    prev = _ctx.checked
    _ctx.checked = True
    try:
        yield
    finally:
        _ctx.checked = prev


class Tensor:
    """A dense n-dimensional array, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_node_epoch", "_node_index",
                 "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _ctx.dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._node_epoch = -1
        self._node_index = -1
        self._grad_owned = False

    # -- basic views ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node_index < 0

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    # -- arithmetic sugar --------------------------------------------------
    def __add__(self, other):
        return _apply("add", (self, _coerce(other, self)))

    __radd__ = __add__

    def __sub__(self, other):
        return _apply("sub", (self, _coerce(other, self)))

    def __rsub__(self, other):
        return _apply("sub", (_coerce(other, self), self))

    def __mul__(self, other):
        return _apply("mul", (self, _coerce(other, self)))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return _apply("matmul", (self, _coerce(other, self)))

    def __neg__(self):
        return _apply("mul", (self, _coerce(-1.0, self)))

    def sum(self, axis=None, keepdims=False):
        return _apply("sum", (self,), axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _apply("mean", (self,), axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return _apply("reshape", (self,), shape=tuple(shape))

    def backward(self):
        backward(self)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


# -- shape and dtype validation ------------------------------------------

def _require_same_dtype(op, tensors):
    first = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != first:
            raise TypeError(f"{op}: mixed dtypes {first} and {t.data.dtype}")


def _check_elementwise(op, a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) <= len(big) and small == big[len(big) - len(small):]:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} (only equal, scalar or trailing-suffix broadcast allowed)")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape` (right-aligned semantics)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _norm_axis(axis, ndim, op):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        a = a + ndim if a < 0 else a
        if not 0 <= a < ndim:
            raise ShapeError(f"{op}: axis {a} out of range for ndim {ndim}")
        out.append(a)
    return tuple(sorted(set(out)))


# -- primitive forward/backward table --------------------------------------

def _fwd_add(ts, attrs):
    a, b = ts
    _check_elementwise("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g, b.data.shape) if b.requires_grad else None)

    return out, bwd


def _fwd_sub(ts, attrs):
    a, b = ts
    _check_elementwise("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.data.shape) if b.requires_grad else None)

    return out, bwd


def _fwd_mul(ts, attrs):
    a, b = ts
    _check_elementwise("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None)

    return out, bwd


def _fwd_matmul(ts, attrs):
    a, b = ts
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape[-1]} != {b.shape[-2]} in {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as err:
        raise ShapeError(f"matmul: leading dims of {a.shape} and {b.shape} do not broadcast") from err
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return out, bwd


def _fwd_exp(ts, attrs):
    (a,) = ts
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,) if a.requires_grad else (None,)

    return out, bwd


def _fwd_log(ts, attrs):
    (a,) = ts
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,) if a.requires_grad else (None,)

    return out, bwd


def _fwd_relu(ts, attrs):
    (a,) = ts
    out = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),) if a.requires_grad else (None,)

    return out, bwd


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fwd_sigmoid(ts, attrs):
    (a,) = ts
    out = _stable_sigmoid(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),) if a.requires_grad else (None,)

    return out, bwd


def _fwd_silu(ts, attrs):
    (a,) = ts
    sig = _stable_sigmoid(a.data)
    out = a.data * sig

    def bwd(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),) if a.requires_grad else (None,)

    return out, bwd


def _fwd_softplus(ts, attrs):
    (a,) = ts
    out = np.logaddexp(0.0, a.data)

    def bwd(g):
        return (g * _stable_sigmoid(a.data),) if a.requires_grad else (None,)

    return out, bwd


def _fwd_square(ts, attrs):
    (a,) = ts
    out = a.data * a.data

    def bwd(g):
        return (g * 2.0 * a.data,) if a.requires_grad else (None,)

    return out, bwd


def _fwd_sum(ts, attrs):
    (a,) = ts
    axis = _norm_axis(attrs.get("axis"), a.ndim, "sum")
    keepdims = bool(attrs.get("keepdims", False))
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.data.shape),)

    return out, bwd


def _fwd_mean(ts, attrs):
    (a,) = ts
    axis = _norm_axis(attrs.get("axis"), a.ndim, "mean")
    keepdims = bool(attrs.get("keepdims", False))
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[i] for i in axis]))

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        gg = g / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.data.shape),)

    return out, bwd


def _fwd_concat(ts, attrs):
    axis = attrs["axis"]
    ndim = ts[0].ndim
    axis = axis + ndim if axis < 0 else axis
    for t in ts[1:]:
        if t.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {ts[0].shape} vs {t.shape}")
        for d in range(ndim):
            if d != axis and t.shape[d] != ts[0].shape[d]:
                raise ShapeError(f"concat: dim {d} mismatch {ts[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    extents = [t.shape[axis] for t in ts]

    def bwd(g):
        grads = []
        offset = 0
        for t, ext in zip(ts, extents):
            if t.requires_grad:
                index = [slice(None)] * ndim
                index[axis] = slice(offset, offset + ext)
                grads.append(g[tuple(index)])
            else:
                grads.append(None)
            offset += ext
        return tuple(grads)

    return out, bwd


def _fwd_slice(ts, attrs):
    (a,) = ts
    axis = attrs["axis"]
    axis = axis + a.ndim if axis < 0 else axis
    start, stop, step = attrs.get("start"), attrs.get("stop"), attrs.get("step", 1)
    if step < 1:
        raise ShapeError(f"slice: step must be positive, got {step}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop, step)
    index = tuple(index)
    attrs["_index"] = index  # backward() scatters in place through this
    out = a.data[index]

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return out, bwd


def _fwd_reverse(ts, attrs):
    (a,) = ts
    axis = attrs["axis"]
    out = np.flip(a.data, axis=axis)

    def bwd(g):
        return (np.flip(g, axis=axis),) if a.requires_grad else (None,)

    return out, bwd


def _fwd_broadcast(ts, attrs):
    (a,) = ts
    shape = tuple(attrs["shape"])
    if len(shape) < a.ndim:
        raise ShapeError(f"broadcast: target {shape} has lower rank than {a.shape}")
    for s, t in zip(a.shape[::-1], shape[::-1]):
        if s != t and s != 1:
            raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}")
    out = np.broadcast_to(a.data, shape)

    def bwd(g):
        return (_unbroadcast(g, a.data.shape),) if a.requires_grad else (None,)

    return out, bwd


def _fwd_reshape(ts, attrs):
    (a,) = ts
    shape = tuple(attrs["shape"])
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from err

    def bwd(g):
        return (g.reshape(a.data.shape),) if a.requires_grad else (None,)

    return out, bwd


def _fwd_transpose(ts, attrs):
    (a,) = ts
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs rank >= 2, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2)

    def bwd(g):
        return (np.swapaxes(g, -1, -2),) if a.requires_grad else (None,)

    return out, bwd


_FORWARD: dict[str, Callable] = {
    "add": _fwd_add, "sub": _fwd_sub, "mul": _fwd_mul, "matmul": _fwd_matmul,
    "exp": _fwd_exp, "log": _fwd_log, "relu": _fwd_relu, "sigmoid": _fwd_sigmoid,
    "silu": _fwd_silu, "softplus": _fwd_softplus, "square": _fwd_square,
    "sum": _fwd_sum, "mean": _fwd_mean, "concat": _fwd_concat,
    "slice": _fwd_slice, "reverse": _fwd_reverse, "broadcast": _fwd_broadcast,
    "reshape": _fwd_reshape, "transpose": _fwd_transpose,
}


def _apply(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    if op not in PRIMITIVE_TAGS:
        raise ValueError(f"unknown primitive tag {op!r}")
    _require_same_dtype(op, inputs)
    if _ctx.checked:
        for t in inputs:
            if not np.isfinite(t.data).all():
                raise FloatingPointError(f"{op}: non-finite input rejected in checked mode")
    out_data, bwd = _FORWARD[op](tuple(inputs), attrs)
    out = Tensor(out_data, dtype=out_data.dtype)
    if _ctx.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node_epoch = _ctx.epoch
        out._node_index = len(_ctx.nodes)
        _ctx.nodes.append(_Node(op, tuple(inputs), out, bwd, attrs))
    return out


def primitive_forward(op: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply one primitive by tag; records a tape node when grads are live."""
    return _apply(op, [as_tensor(t) for t in inputs], **attrs)


# -- public functional wrappers ---------------------------------------------

def matmul(a, b):
    return _apply("matmul", (as_tensor(a), as_tensor(b)))


def exp(x):
    return _apply("exp", (as_tensor(x),))


def log(x):
    return _apply("log", (as_tensor(x),))


def relu(x):
    return _apply("relu", (as_tensor(x),))


def sigmoid(x):
    return _apply("sigmoid", (as_tensor(x),))


def silu(x):
    return _apply("silu", (as_tensor(x),))


def softplus(x):
    return _apply("softplus", (as_tensor(x),))


def square(x):
    return _apply("square", (as_tensor(x),))


def concat(tensors, axis: int):
    return _apply("concat", tuple(as_tensor(t) for t in tensors), axis=axis)


def slice_axis(x, axis: int, start=None, stop=None, step: int = 1):
    return _apply("slice", (as_tensor(x),), axis=axis, start=start, stop=stop, step=step)


def reverse(x, axis: int):
    return _apply("reverse", (as_tensor(x),), axis=axis)


def broadcast_to(x, shape):
    return _apply("broadcast", (as_tensor(x),), shape=tuple(shape))


def reshape(x, shape):
    return _apply("reshape", (as_tensor(x),), shape=tuple(shape))


def swap_last_axes(x):
    return _apply("transpose", (as_tensor(x),))


# -- backward sweep ----------------------------------------------------------

def _accumulate(inp: Tensor, gin: np.ndarray):
    # `gin` may alias upstream grad buffers, so it is only added in place into
    # buffers this sweep allocated itself (_grad_owned).
    if inp.grad is None:
        inp.grad = gin
        inp._grad_owned = False
    elif inp._grad_owned:
        np.add(inp.grad, gin, out=inp.grad)
    else:
        inp.grad = inp.grad + gin
        inp._grad_owned = True


def backward(root: Tensor):
    """Populate grads of everything the scalar `root` depends on.

    Sweeps the active tape in reverse from root's node. Leaves that were
    recorded but do not influence root end up with zero grads. The tape is
    released afterwards.
    """
    if root.data.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    if root._node_index < 0 or root._node_epoch != _ctx.epoch:
        raise GraphError("backward: root was not recorded on the active tape")
    nodes = _ctx.nodes
    root_index = root._node_index
    root.grad = np.ones_like(root.data)
    root._grad_owned = True
    for node in reversed(nodes[: root_index + 1]):
        g = node.out.grad
        if g is None:
            continue
        if node.op == "slice":
            # disjoint scatter: accumulate straight into the input buffer
            inp = node.inputs[0]
            if inp.requires_grad:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                    inp._grad_owned = True
                elif not inp._grad_owned:
                    inp.grad = inp.grad.copy()
                    inp._grad_owned = True
                inp.grad[node.attrs["_index"]] += g
            continue
        for inp, gin in zip(node.inputs, node.backward(g)):
            if gin is not None:
                _accumulate(inp, gin)
    for node in nodes[: root_index + 1]:
        for inp in node.inputs:
            if inp.is_leaf and inp.requires_grad and inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
    reset_tape()


# -- finite-difference gradient check ----------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-5, max_components: int | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    `f` maps the tensor x to a scalar Tensor and must be pure. Requires
    64-bit data. When `max_components` is given, a deterministic subsample
    of entries is probed instead of every component.
    """
    if x.data.dtype != np.float64:
        raise TypeError("grad_check requires float64 tensors")
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    x.grad = None
    x.requires_grad = True
    out = f(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1).copy()

    n = x.data.size
    if max_components is not None and max_components < n:
        probe = np.random.Generator(np.random.Philox(key=0)).permutation(n)[:max_components]
    else:
        probe = np.arange(n)

    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
            if err > worst:
                worst = err
    return worst

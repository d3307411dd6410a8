"""Primitive operations and their adjoints.

Every adjoint is written with the public functions of this module, so a
backward pass run with ``create_graph=True`` records ordinary nodes that can
be differentiated again.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, apply, as_tensor, register


def _unbroadcast(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    return t if t.shape == shape else sum_to(t, shape)


def _broadcast_shape(a: np.ndarray, b: np.ndarray, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def _add_fwd(a, b):
    _broadcast_shape(a, b, "add")
    return a + b


def _add_adj(g, inputs, out, needs):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _broadcast_shape(a, b, "subtract")
    return a - b


def _sub_adj(g, inputs, out, needs):
    a, b = inputs
    return _unbroadcast(g, a.shape), scale(_unbroadcast(g, b.shape), -1.0)


def _mul_fwd(a, b):
    _broadcast_shape(a, b, "multiply")
    return a * b


def _mul_adj(g, inputs, out, needs):
    a, b = inputs
    ga = _unbroadcast(multiply(g, b), a.shape) if needs[0] else None
    gb = _unbroadcast(multiply(g, a), b.shape) if needs[1] else None
    return ga, gb


def _scale_fwd(x, c):
    return x * c


def _scale_adj(g, inputs, out, needs, c):
    return (scale(g, c),)


def _square_fwd(x):
    return x * x


def _square_adj(g, inputs, out, needs):
    (x,) = inputs
    return (multiply(g, scale(x, 2.0)),)


def _exp_fwd(x):
    return np.exp(x)


def _exp_adj(g, inputs, out, needs):
    return (multiply(g, out),)


def _log_fwd(x):
    if np.any(x <= 0):
        raise ValueError("log: non-positive input")
    return np.log(x)


def _log_adj(g, inputs, out, needs):
    (x,) = inputs
    return (multiply(g, reciprocal(x)),)


def _reciprocal_fwd(x):
    if np.any(x == 0):
        raise ZeroDivisionError("reciprocal of zero")
    return 1.0 / x


def _reciprocal_adj(g, inputs, out, needs):
    return (multiply(g, scale(square(out), -1.0)),)


def _relu_fwd(x):
    return np.maximum(x, 0.0)


def _relu_adj(g, inputs, out, needs):
    (x,) = inputs
    # subgradient 0 at x == 0; the mask is piecewise constant so it is a constant
    return (multiply(g, Tensor((x.data > 0).astype(np.float64))),)


def _clip_fwd(x, lo, hi):
    return np.clip(x, lo, hi)


def _clip_adj(g, inputs, out, needs, lo, hi):
    (x,) = inputs
    mask = ((x.data >= lo) & (x.data <= hi)).astype(np.float64)
    return (multiply(g, Tensor(mask)),)


def _log_softmax_fwd(x):
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _log_softmax_adj(g, inputs, out, needs):
    return (subtract(g, multiply(exp(out), sum(g, axis=-1, keepdims=True))),)


# ---------------------------------------------------------------- shape / reduction

def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    return a @ b


def _matmul_adj(g, inputs, out, needs):
    a, b = inputs
    ga = matmul(g, transpose(b)) if needs[0] else None
    gb = matmul(transpose(a), g) if needs[1] else None
    return ga, gb


def _transpose_fwd(x, axes):
    return np.transpose(x, axes)


def _transpose_adj(g, inputs, out, needs, axes):
    inv = None if axes is None else tuple(int(i) for i in np.argsort(axes))
    return (transpose(g, inv),)


def _reshape_fwd(x, shape):
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return x.reshape(shape)


def _reshape_adj(g, inputs, out, needs, shape):
    return (reshape(g, inputs[0].shape),)


def _sum_fwd(x, axis, keepdims):
    return np.asarray(np.sum(x, axis=axis, keepdims=keepdims))


def _sum_adj(g, inputs, out, needs, axis, keepdims):
    (x,) = inputs
    if axis is None:
        kept = (1,) * x.ndim
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = {a % x.ndim for a in axes}
        kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    if g.shape != kept:
        g = reshape(g, kept)
    return (broadcast_to(g, x.shape),)


def _sum_to_fwd(x, shape):
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: {x.shape} has fewer dims than {shape}")
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    return np.sum(x, axis=axes, keepdims=True).reshape(shape)


def _sum_to_adj(g, inputs, out, needs, shape):
    return (broadcast_to(g, inputs[0].shape),)


def _broadcast_to_fwd(x, shape):
    try:
        return np.broadcast_to(x, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}") from exc


def _broadcast_to_adj(g, inputs, out, needs, shape):
    return (sum_to(g, inputs[0].shape),)


def _gather_row_fwd(x, idx):
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"gather_row: bad shapes {x.shape}, {idx.shape}")
    return x[np.arange(x.shape[0]), idx]


def _gather_row_adj(g, inputs, out, needs, idx):
    return (scatter_row(g, idx, inputs[0].shape[1]),)


def _scatter_row_fwd(v, idx, n):
    out = np.zeros((v.shape[0], n))
    out[np.arange(v.shape[0]), idx] = v
    return out


def _scatter_row_adj(g, inputs, out, needs, idx, n):
    return (gather_row(g, idx),)


# ---------------------------------------------------------------- convolution / pooling

def _im2col_fwd(x, k):
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"im2col: input {x.shape} too small for kernel {k}")
    b, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    ho, wo = h - k + 1, w - k + 1
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho, wo, c * k * k)


def _im2col_adj(g, inputs, out, needs, k):
    return (col2im(g, inputs[0].shape, k),)


def _col2im_fwd(cols, shape, k):
    b, c, h, w = shape
    ho, wo = h - k + 1, w - k + 1
    if cols.shape != (b, ho, wo, c * k * k):
        raise ShapeError(f"col2im: {cols.shape} does not match image {shape}, kernel {k}")
    patches = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho, j:j + wo] += patches[:, :, i, j]
    return out


def _col2im_adj(g, inputs, out, needs, shape, k):
    return (im2col(g, k),)


def _conv2d_fwd(x, w):
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: kernel must be (out, in, k, k), got {w.shape}")
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    cols = _im2col_fwd(x, w.shape[2])
    y = cols @ w.reshape(w.shape[0], -1).T  # B,Ho,Wo,O
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _conv2d_adj(g, inputs, out, needs):
    x, w = inputs
    b, o, ho, wo = g.shape
    k = w.shape[2]
    ckk = w.shape[1] * k * k
    g_rows = reshape(transpose(g, (0, 2, 3, 1)), (b * ho * wo, o))
    gx = gw = None
    if needs[0]:
        gcols = reshape(matmul(g_rows, reshape(w, (o, ckk))), (b, ho, wo, ckk))
        gx = col2im(gcols, x.shape, k)
    if needs[1]:
        cols = reshape(im2col(x, k), (b * ho * wo, ckk))
        gw = reshape(matmul(transpose(g_rows), cols), w.shape)
    return gx, gw


def _avgpool2d_fwd(x, size):
    if x.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
        raise ShapeError(f"avgpool2d: {x.shape} not divisible by {size}")
    b, c, h, w = x.shape
    return x.reshape(b, c, h // size, size, w // size, size).mean(axis=(3, 5))


def _avgpool2d_adj(g, inputs, out, needs, size):
    return (unpool2d(g, size),)


def _unpool2d_fwd(x, size):
    return np.repeat(np.repeat(x, size, axis=2), size, axis=3) / (size * size)


def _unpool2d_adj(g, inputs, out, needs, size):
    return (avgpool2d(g, size),)


for _name, _fwd, _adj in [
    ("add", _add_fwd, _add_adj),
    ("subtract", _sub_fwd, _sub_adj),
    ("multiply", _mul_fwd, _mul_adj),
    ("scale", _scale_fwd, _scale_adj),
    ("square", _square_fwd, _square_adj),
    ("exp", _exp_fwd, _exp_adj),
    ("log", _log_fwd, _log_adj),
    ("reciprocal", _reciprocal_fwd, _reciprocal_adj),
    ("relu", _relu_fwd, _relu_adj),
    ("clip", _clip_fwd, _clip_adj),
    ("log_softmax", _log_softmax_fwd, _log_softmax_adj),
    ("matmul", _matmul_fwd, _matmul_adj),
    ("transpose", _transpose_fwd, _transpose_adj),
    ("reshape", _reshape_fwd, _reshape_adj),
    ("sum", _sum_fwd, _sum_adj),
    ("sum_to", _sum_to_fwd, _sum_to_adj),
    ("broadcast_to", _broadcast_to_fwd, _broadcast_to_adj),
    ("gather_row", _gather_row_fwd, _gather_row_adj),
    ("scatter_row", _scatter_row_fwd, _scatter_row_adj),
    ("im2col", _im2col_fwd, _im2col_adj),
    ("col2im", _col2im_fwd, _col2im_adj),
    ("conv2d", _conv2d_fwd, _conv2d_adj),
    ("avgpool2d", _avgpool2d_fwd, _avgpool2d_adj),
    ("unpool2d", _unpool2d_fwd, _unpool2d_adj),
]:
    register(_name, _fwd, _adj)


# ---------------------------------------------------------------- public API

def add(a, b) -> Tensor:
    return apply("add", a, b)


def subtract(a, b) -> Tensor:
    return apply("subtract", a, b)


def multiply(a, b) -> Tensor:
    return apply("multiply", a, b)


def scale(x, c: float) -> Tensor:
    return apply("scale", x, c=float(c))


def square(x) -> Tensor:
    return apply("square", x)


def exp(x) -> Tensor:
    return apply("exp", x)


def log(x) -> Tensor:
    return apply("log", x)


def reciprocal(x) -> Tensor:
    return apply("reciprocal", x)


def relu(x) -> Tensor:
    return apply("relu", x)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient passes where ``lo <= x <= hi``."""
    return apply("clip", x, lo=float(lo), hi=float(hi))


def log_softmax(x) -> Tensor:
    """Log-softmax over the last axis."""
    return apply("log_softmax", x)


def softmax(x) -> Tensor:
    return exp(log_softmax(x))


def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


def transpose(x, axes=None) -> Tensor:
    return apply("transpose", x, axes=None if axes is None else tuple(axes))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    return apply("reshape", x, shape=shape)


def flatten(x) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def sum_to(x, shape) -> Tensor:
    return apply("sum_to", x, shape=tuple(shape))


def broadcast_to(x, shape) -> Tensor:
    return apply("broadcast_to", x, shape=tuple(shape))


def gather_row(x, idx) -> Tensor:
    """Pick ``x[i, idx[i]]`` for every row ``i``."""
    return apply("gather_row", x, idx=np.asarray(idx, dtype=np.intp))


def scatter_row(v, idx, n: int) -> Tensor:
    return apply("scatter_row", v, idx=np.asarray(idx, dtype=np.intp), n=int(n))


def im2col(x, k: int) -> Tensor:
    return apply("im2col", x, k=int(k))


def col2im(cols, shape, k: int) -> Tensor:
    return apply("col2im", cols, shape=tuple(shape), k=int(k))


def conv2d(x, w) -> Tensor:
    """Valid, stride-1 cross-correlation of ``(B, C, H, W)`` with ``(O, C, k, k)``."""
    return apply("conv2d", x, w)


def avgpool2d(x, size: int = 2) -> Tensor:
    return apply("avgpool2d", x, size=int(size))


def unpool2d(x, size: int = 2) -> Tensor:
    return apply("unpool2d", x, size=int(size))

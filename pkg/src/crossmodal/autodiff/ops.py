"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects and registers a
backward rule through :func:`make_node`. Elementwise binary ops require
identical shapes; the only implicit broadcast is bias addition inside
``linear`` and ``conv2d``.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, ShapeError, SizeError
from .tensor import Tensor, as_tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_bn_flags = threading.local()


@contextlib.contextmanager
def frozen_statistics():
    """Train-mode batchnorm inside this block normalizes with batch statistics
    but leaves running averages untouched."""
    prev = getattr(_bn_flags, "frozen", False)
    _bn_flags.frozen = True
    try:
        yield
    finally:
        _bn_flags.frozen = prev


@contextlib.contextmanager
def _forbid_stat_updates():
    prev = getattr(_bn_flags, "forbid", False)
    _bn_flags.forbid = True
    try:
        yield
    finally:
        _bn_flags.forbid = prev


@contextlib.contextmanager
def branch_trace():
    """Collect the branch taken by every piecewise op evaluated inside the block.

    Yields a list that fills with one byte string per relu, max or clamp
    evaluation; two evaluations lie on the same smooth piece iff their traces
    are equal.
    """
    prev = getattr(_bn_flags, "trace", None)
    trace: list[bytes] = []
    _bn_flags.trace = trace
    try:
        yield trace
    finally:
        _bn_flags.trace = prev


def record_branch(selection: np.ndarray) -> None:
    """Append a discrete choice (mask or index array) to the active branch trace, if any."""
    trace = getattr(_bn_flags, "trace", None)
    if trace is not None:
        trace.append(np.ascontiguousarray(selection).tobytes())


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.data * a.data.dtype.type(c), (a,), lambda g: (g * a.data.dtype.type(c),), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    record_branch(mask)
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0 <= slope <= 1:
        raise ValueError("leaky_relu slope must lie in [0, 1]")
    s = x.dtype.type(slope)
    mask = x.data > 0
    record_branch(mask)
    return make_node(np.maximum(x.data, x.data * s), (x,), lambda g: (np.where(mask, g, g * s),), "leaky_relu")


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    record_branch(mask)
    return make_node(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clamp")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ------------------------------------------------------------------ reductions

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_node(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / count)


def sqnorm(x: Tensor, axis: int = -1) -> Tensor:
    """Squared L2 norm along ``axis``."""
    return make_node(np.sum(x.data * x.data, axis=axis), (x,),
                     lambda g: (2 * np.expand_dims(g, axis) * x.data,), "sqnorm")


def max_over_set(x: Tensor, axis: int = 1) -> Tensor:
    """Max along ``axis``; gradient flows only to the first maximal entry."""
    if x.shape[axis] == 0:
        raise SizeError("max over an empty set")
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    record_branch(idx)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, np.expand_dims(g, axis), axis=axis)
        return (dx,)

    return make_node(out, (x,), backward, "max_over_set")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4D input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return make_node(x.data.mean(axis=(2, 3)), (x,),
                     lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),), "gap")


# --------------------------------------------------------------- shape plumbing

def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def expand(x: Tensor, axis: int, reps: int) -> Tensor:
    """Insert a new axis and repeat ``reps`` times along it."""
    out = np.repeat(np.expand_dims(x.data, axis), reps, axis=axis)
    return make_node(out, (x,), lambda g: (g.sum(axis=axis),), "expand")


def take(x: Tensor, index: int, axis: int = -1) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        dx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        dx[tuple(sl)] = g
        return (dx,)

    return make_node(out, (x,), backward, "take")


def pick(x: Tensor, labels: np.ndarray) -> Tensor:
    """``x[..., labels]`` elementwise: [..., C] with int labels [...] -> [...]."""
    labels = np.asarray(labels)
    if labels.shape != x.shape[:-1]:
        raise ShapeError(f"pick: labels {labels.shape} vs values {x.shape}")
    idx = labels[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, g[..., None], axis=-1)
        return (dx,)

    return make_node(out, (x,), backward, "pick")


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Neighbor gather: x [B, n, D], idx [B, m, k] -> [B, m, k, D]."""
    B, n, D = x.shape
    idx = np.asarray(idx)
    if idx.ndim != 3 or idx.shape[0] != B:
        raise ShapeError(f"gather: index shape {idx.shape} incompatible with {x.shape}")
    flat = (idx + (np.arange(B) * n)[:, None, None]).ravel()
    out = x.data.reshape(B * n, D)[flat].reshape(*idx.shape, D)

    def backward(g):
        dx = np.zeros((B * n, D), dtype=x.dtype)
        np.add.at(dx, flat, g.reshape(-1, D))
        return (dx.reshape(B, n, D),)

    return make_node(out, (x,), backward, "gather")


# ---------------------------------------------------------------- distances

def pairwise_sqdist(x: Tensor) -> Tensor:
    """[B, n, D] -> [B, n, n] squared Euclidean distances."""
    X = x.data
    sq = np.sum(X * X, axis=-1)
    d = sq[:, :, None] + sq[:, None, :] - 2 * X @ np.swapaxes(X, 1, 2)

    def backward(g):
        s = g + np.swapaxes(g, 1, 2)
        return (2 * (s.sum(-1)[..., None] * X - s @ X),)

    return make_node(d, (x,), backward, "pairwise_sqdist")


# ---------------------------------------------------------------- softmax

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_node(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return make_node(y, (x,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------- layers

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    lead = x.shape[:-1]

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        dx = (g2 @ weight.data).reshape(*lead, x.shape[-1])
        dw = g2.T @ x2
        db = g2.sum(axis=0) if bias is not None else None
        return (dx, dw, db)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make_node(out, parents, backward, "linear")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded cross-correlation. x [B, C, H, W], weight [K, C, k, k] with k odd."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4D tensors, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if Cw != C or kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: unsupported stride {stride}")
    if bias is not None and bias.shape != (K,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {K} filters")
    p = kh // 2
    Ho, Wo = -(-H // stride), -(-W // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(K, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, K)
        dw = (g2.T @ cols).reshape(weight.shape)
        db = g2.sum(axis=0) if bias is not None else None
        dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
        return (dx, dw, db)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make_node(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 window, stride 2; a trailing odd row/column is dropped."""
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"max_pool2d: input {x.shape} too small")
    xc = x.data[:, :, :2 * Ho, :2 * Wo]
    r = xc.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    idx = np.argmax(r, axis=-1)[..., None]
    record_branch(idx)
    out = np.take_along_axis(r, idx, axis=-1)[..., 0]

    def backward(g):
        dr = np.zeros_like(r)
        np.put_along_axis(dr, idx, g[..., None], axis=-1)
        d = dr.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * Ho, 2 * Wo)
        if (2 * Ho, 2 * Wo) == (H, W):
            return (d,)
        dx = np.zeros_like(x.data)
        dx[:, :, :2 * Ho, :2 * Wo] = d
        return (dx,)

    return make_node(out, (x,), backward, "max_pool2d")


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def _channel_sum(a: np.ndarray, axis: int) -> np.ndarray:
    """Sum over every axis except ``axis``; routed through BLAS where the layout allows."""
    C = a.shape[axis]
    if axis == a.ndim - 1:
        a2 = a.reshape(-1, C)
        return np.ones(a2.shape[0], dtype=a.dtype) @ a2
    if axis == 1:
        a3 = a.reshape(a.shape[0], C, -1)
        return a3.sum(axis=2).sum(axis=0)
    return a.sum(axis=tuple(i for i in range(a.ndim) if i != axis))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState | None,
               training: bool, axis: int = 1, eps: float = BN_EPS,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization; ``axis`` is the channel axis, all others are reduced."""
    axis = axis % x.ndim
    C = x.shape[axis]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: affine params {gamma.shape}/{beta.shape} vs {C} channels")
    bshape = [1] * x.ndim
    bshape[axis] = C
    gam = gamma.data.reshape(bshape)
    dt = x.dtype.type
    n = x.size // C

    def csum(a):
        return _channel_sum(a, axis)

    if training:
        if n < 2:
            raise SizeError("batch_norm in train mode needs more than one value per channel")
        mu = csum(x.data) / dt(n)
        xc = x.data - mu.reshape(bshape)
        var = csum(xc * xc) / dt(n)
        invstd = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
        xhat = xc * invstd.reshape(bshape)
        if state is not None and not getattr(_bn_flags, "frozen", False):
            if getattr(_bn_flags, "forbid", False):
                raise ContractError("running-statistic update inside a gradient check; "
                                    "wrap the program in frozen_statistics()")
            m = momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mu
            state.running_var[...] = (1 - m) * state.running_var + m * var * n / (n - 1)

        def backward(g):
            dbeta = csum(g)
            dgamma = csum(g * xhat)
            # dx = gamma * invstd * (g - mean(g) - xhat * mean(g * xhat))
            k = (gamma.data * invstd).reshape(bshape)
            dx = k * (g - (dbeta / dt(n)).reshape(bshape) - xhat * (dgamma / dt(n)).reshape(bshape))
            return (dx, dgamma, dbeta)
    else:
        rm = state.running_mean.astype(x.dtype) if state is not None else np.zeros(C, x.dtype)
        rv = state.running_var.astype(x.dtype) if state is not None else np.ones(C, x.dtype)
        invstd = (1.0 / np.sqrt(rv + dt(eps))).astype(x.dtype)
        xhat = (x.data - rm.reshape(bshape)) * invstd.reshape(bshape)

        def backward(g):
            return (g * (gamma.data * invstd).reshape(bshape), csum(g * xhat), csum(g))

    out = xhat * gam + beta.data.reshape(bshape)
    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")

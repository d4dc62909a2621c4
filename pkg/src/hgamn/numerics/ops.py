"""Differentiable primitives.

Broadcasting follows numpy; gradients are summed back to each input's shape.
Non-Tensor operands are treated as constants.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import sparse

from .tensor import DimensionError, NumericError, Tensor, as_tensor, default_dtype, make_op


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a = as_tensor(a)
    b = _const(b, a)
    sa, sb = a.shape, b.shape
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _const(b, a)
    else:
        a = _const(a, b)
    sa, sb = a.shape, b.shape
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _const(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad * bd, (a, b), backward, "mul")


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x[..., a] @ w[a, b]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"matmul: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return make_op(xd @ wd, (x, w), backward, "matmul")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    sel = a.data >= b.data
    return make_op(
        np.where(sel, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * sel, a.shape), _unbroadcast(g * ~sel, b.shape)),
        "maximum",
    )


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_op(data, xs, backward, "concat")


def scatter_rows(idx: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[i]] += rows[i]`` for a 1-D ``idx``; ``out`` has ``n`` rows."""
    flat = rows.reshape(len(idx), -1)
    sel = sparse.csr_matrix(
        (np.ones(len(idx), dtype=flat.dtype), (idx, np.arange(len(idx)))), shape=(n, len(idx))
    )
    return np.asarray(sel @ flat).reshape((n,) + rows.shape[1:])


def take(x: Tensor, idx) -> Tensor:
    """Gather rows along axis 0; ``idx`` may have any shape."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def backward(g):
        if len(shape) == 1:
            return (np.bincount(idx.ravel(), weights=g.ravel(), minlength=shape[0]).astype(g.dtype),)
        return (scatter_rows(idx.ravel(), g.reshape((-1,) + shape[1:]), shape[0]),)

    return make_op(x.data[idx], (x,), backward, "take")


def segment_sum(x: Tensor, segments, num_segments: int) -> Tensor:
    """``out[s] = sum of x[i] with segments[i] == s``."""
    segments = np.asarray(segments, dtype=np.intp)
    if x.ndim == 1:
        out = np.bincount(segments, weights=x.data, minlength=num_segments).astype(x.dtype)
    else:
        out = scatter_rows(segments, x.data, num_segments)
    return make_op(out, (x,), lambda g: (g[segments],), "segment_sum")


def softmax(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Max-stabilised softmax; entries where ``mask`` is False come out exactly 0."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: every entry masked along the reduction axis")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), backward, "softmax")


def segment_softmax(scores: Tensor, segments, num_segments: int) -> Tensor:
    """Softmax over groups of a flat score vector (edges grouped by receiving node)."""
    segments = np.asarray(segments, dtype=np.intp)
    s = scores.data
    if s.ndim != 1:
        raise DimensionError("segment_softmax expects a 1-D score vector")
    top = np.full(num_segments, -np.inf, dtype=s.dtype)
    np.maximum.at(top, segments, s)
    e = np.exp(s - top[segments])
    denom = np.zeros(num_segments, dtype=s.dtype)
    np.add.at(denom, segments, e)
    y = e / denom[segments]

    def backward(g):
        gy = g * y
        acc = np.zeros(num_segments, dtype=g.dtype)
        np.add.at(acc, segments, gy)
        return (gy - y * acc[segments],)

    return make_op(y, (scores,), backward, "segment_softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return make_op(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.intp)
    n = logits.shape[0]
    if logits.ndim != 2 or targets.shape != (n,):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = -np.log(sm[rows, targets]).mean()

    def backward(g):
        d = sm.copy()
        d[rows, targets] -= 1.0
        return (d * (g / n),)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors scaled by ``1/(1-rate)``; identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng stream")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, keep)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or default_dtype()))


def assert_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(x.data).all():
        raise NumericError(f"non-finite values in {what}")
    return x

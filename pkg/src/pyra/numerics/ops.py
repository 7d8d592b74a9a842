"""Differentiable primitives over :class:`Tensor`.

Each function computes its forward value with numpy and registers a closure
returning one cotangent per input (``None`` for non-differentiable inputs).
Broadcasting follows numpy rules; cotangents are summed back to input shapes.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import DimensionError, Tensor, as_tensor, get_default_dtype

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw)


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "hadamard")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._result(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form: no overflow, and sigmoid(0) == 0.5 exactly
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    out = x * cdf

    def bw(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return Tensor._result(out, (a,), bw)


# --------------------------------------------------------------------------- shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data @ b.data, (a, b), bw)


def transpose(a, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two (matrix transpose)."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}; shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tensors, bw)


def index(a, key) -> Tensor:
    """Basic or advanced numpy indexing; the cotangent is scattered back with add."""
    a = as_tensor(a)
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return Tensor._result(np.array(out), (a,), bw)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


# --------------------------------------------------------------------------- normalisers


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    prob = np.exp(out)

    def bw(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), bw)


def layernorm(x, weight=None, bias=None, eps: float = 1e-6, axis: int = -1) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis``, then optional affine.

    ``weight``/``bias`` broadcast against the normalised tensor.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"layernorm over an empty axis: shape {x.shape}, axis {axis}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    w = None if weight is None else as_tensor(weight)
    b = None if bias is None else as_tensor(bias)
    out = xhat
    if w is not None:
        out = out * w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        gw = None if w is None else _unbroadcast(g * xhat, w.shape)
        gb = None if b is None else _unbroadcast(g, b.shape)
        gh = g if w is None else g * w.data
        gx = inv * (
            gh
            - gh.mean(axis=axis, keepdims=True)
            - xhat * (gh * xhat).mean(axis=axis, keepdims=True)
        )
        grads = [gx]
        if w is not None:
            grads.append(gw)
        if b is not None:
            grads.append(gb)
        return tuple(grads)

    parents = [x] + [t for t in (w, b) if t is not None]
    return Tensor._result(out, parents, bw)


# --------------------------------------------------------------------------- row gather/scatter


def _batched(idx: np.ndarray, x_shape: tuple[int, ...]) -> np.ndarray:
    lead = x_shape[:-2]
    if idx.shape[:-1] != lead:
        raise DimensionError(f"index shape {idx.shape} does not match leading dims of {x_shape}")
    return idx


def gather_rows(x, indices) -> Tensor:
    """Select rows along the token axis (-2).

    ``x`` is ``(..., n, D)`` and ``indices`` is ``(..., k)`` with matching
    leading dimensions; the result is ``(..., k, D)``.
    """
    x = as_tensor(x)
    idx = _batched(np.asarray(indices, dtype=np.intp), x.shape)
    n = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: indices out of range for {n} rows")
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)

    def bw(g):
        full = np.zeros_like(x.data)
        lead = np.indices(idx.shape, sparse=True)[:-1]
        np.add.at(full, (*lead, idx), g)
        return (full,)

    return Tensor._result(out, (x,), bw)


def scatter_mean_rows(values, target_indices, sizes, n_out: int | None = None) -> Tensor:
    """Size-weighted mean of value rows grouped by target row.

    Output row ``j`` is ``sum_i s_i v_i / sum_i s_i`` over rows ``i`` with
    ``target_indices[i] == j``. Rows that receive nothing are zero.
    """
    v = as_tensor(values)
    tgt = _batched(np.asarray(target_indices, dtype=np.intp), v.shape)
    s = np.asarray(sizes, dtype=v.dtype)
    if s.shape != tgt.shape:
        raise DimensionError(f"sizes shape {s.shape} != target shape {tgt.shape}")
    if n_out is None:
        n_out = int(tgt.max()) + 1 if tgt.size else 0
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n_out):
        raise IndexError(f"scatter_mean_rows: targets out of range for {n_out} rows")
    lead = np.indices(tgt.shape, sparse=True)[:-1]
    total = np.zeros(tgt.shape[:-1] + (n_out,), dtype=v.dtype)
    np.add.at(total, (*lead, tgt), s)
    denom = total[(*lead, tgt)]
    w = np.divide(s, denom, out=np.zeros_like(s), where=denom != 0)
    out = np.zeros(tgt.shape[:-1] + (n_out, v.shape[-1]), dtype=v.dtype)
    np.add.at(out, (*lead, tgt), w[..., None] * v.data)

    def bw(g):
        return (g[(*lead, tgt)] * w[..., None],)

    return Tensor._result(out, (v,), bw)


# --------------------------------------------------------------------------- losses


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``(B, C)`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    logp = log_softmax(logits, axis=-1)
    picked = index(logp, (np.arange(labels.size), labels))
    return neg(mean(picked))


def constant(value, shape=()) -> Tensor:
    return Tensor(np.full(shape, value, dtype=get_default_dtype()))

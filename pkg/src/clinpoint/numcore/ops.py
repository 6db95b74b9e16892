"""Differentiable primitives over :class:`Tensor`.

Every function accepts tensors or array-likes (constants) and returns a
Tensor that is recorded on the active tape when any input requires grad.
Reductions use numpy's fixed pairwise order, segment reductions use
``np.add.reduceat``/``np.bincount`` which accumulate sequentially, so results
are reproducible bit for bit.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _expands(small: tuple, big: tuple) -> bool:
    """True if ``small`` can be expanded to ``big`` under the adopted rule."""
    if small == big:
        return True
    if len(small) <= len(big) and all(s == 1 for s in small):
        return True
    if len(small) < len(big):
        return big[len(big) - len(small):] == small
    if len(small) == len(big):
        return all(s == b or s == 1 for s, b in zip(small, big))
    return False


def broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if _expands(b, a):
        return a
    if _expands(a, b):
        return b
    raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; values are copied, not blended."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    shape = broadcast_shape(a.shape, b.shape, "where")
    shape = broadcast_shape(shape, cond.shape, "where")
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        zero = np.zeros_like(g)
        return (_unbroadcast(np.where(cond, g, zero), sa),
                _unbroadcast(np.where(cond, zero, g), sb))

    return make_result(out, (a, b), backward, "where")


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, safe for finite differences)."""
    a = as_tensor(a)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return make_result(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a (..., k) @ b (k, n)``; leading axes of ``a`` are flattened for BLAS."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    a2 = ad.reshape(-1, ad.shape[-1])
    out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, bd.shape[1])
        ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum. Every input index must appear in the other operand
    or in the output, so adjoints are again plain einsums."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        for ch in own:
            if ch not in other and ch not in out_idx:
                raise ShapeError(f"einsum {spec}: index {ch!r} is summed within one operand")
    try:
        out = np.einsum(spec, a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"einsum {spec}: shapes {a.shape} and {b.shape}: {exc}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, bd) if a.requires_grad else None
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, ad) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "einsum")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(out, dtype=DTYPE), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(out), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return make_result(out, ts, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def getitem(a, idx) -> Tensor:
    """Basic (slice/integer) indexing; use :func:`take` for index arrays."""
    a = as_tensor(a)
    shape = a.shape
    out = a.data[idx]

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return make_result(np.array(out, dtype=DTYPE), (a,), backward, "getitem")


def take(a, index: np.ndarray) -> Tensor:
    """Gather rows along axis 0; adjoint scatter-adds with a fixed order."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    out = a.data[index]
    rest = a.shape[1:]

    def backward(g):
        return (scatter_rows(g.reshape((index.size,) + rest), index.reshape(-1), n),)

    return make_result(out, (a,), backward, "take")


def scatter_rows(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Sum ``values[k]`` into row ``index[k]`` of an ``(n, ...)`` array."""
    rest = values.shape[1:]
    width = int(np.prod(rest)) if rest else 1
    if width == 1:
        out = np.bincount(index, weights=values.reshape(-1), minlength=n)
        return out.reshape((n,) + rest)
    flat_idx = (index[:, None] * width + np.arange(width)[None, :]).reshape(-1)
    out = np.bincount(flat_idx, weights=values.reshape(-1), minlength=n * width)
    return out.reshape((n,) + rest)


def segment_sum(a, starts: np.ndarray, seg_ids: np.ndarray) -> Tensor:
    """Sum consecutive row groups. ``starts`` are the first rows of each (nonempty)
    segment and ``seg_ids[k]`` the segment of row ``k``."""
    a = as_tensor(a)
    starts = np.asarray(starts, dtype=np.intp)
    out = np.add.reduceat(a.data, starts, axis=0) if a.shape[0] else np.zeros((0,) + a.shape[1:])
    return make_result(out, (a,), lambda g: (g[seg_ids],), "segment_sum")


# ---------------------------------------------------------------------------
# normalizers
# ---------------------------------------------------------------------------

def softmax(logits, mask=None) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are 0."""
    logits = as_tensor(logits)
    x = logits.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"softmax: mask shape {mask.shape} differs from logits {x.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("softmax: a reduction row is fully masked")
    row_max = np.max(np.where(mask, x, -np.inf), axis=-1, keepdims=True)
    ex = np.where(mask, np.exp(np.where(mask, x - row_max, 0.0)), 0.0)
    out = ex / ex.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (logits,), backward, "softmax")


def segment_softmax(logits, starts: np.ndarray, seg_ids: np.ndarray) -> Tensor:
    """Softmax within consecutive row segments (axis 0), independently per
    trailing column. Stabilized by each segment's maximum."""
    logits = as_tensor(logits)
    x = logits.data
    seg_max = np.maximum.reduceat(x, starts, axis=0)
    ex = np.exp(x - seg_max[seg_ids])
    denom = np.add.reduceat(ex, starts, axis=0)
    out = ex / denom[seg_ids]

    def backward(g):
        dot = np.add.reduceat(g * out, starts, axis=0)
        return (out * (g - dot[seg_ids]),)

    return make_result(out, (logits,), backward, "segment_softmax")


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return make_result(out, (logits,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True) / n
        return (inv * (g - gm - xhat * gx),)

    return make_result(xhat, (a,), backward, "layer_norm")


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood of integer ``targets``; shape ``(n,)``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    lsm = log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    onehot[np.arange(len(targets)), targets] = 1.0
    return neg(sum(mul(lsm, onehot), axis=-1))


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = sqrt(add(sum(square(a), axis=-1, keepdims=True), eps))
    return div(a, norm)


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)

"""Differentiable operations over :class:`Tensor`.

Every op computes its result eagerly with numpy and, when a tape is active
and some input requires grad, records a closure mapping the output gradient
to one gradient per input.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np

from ..errors import DegenerateSliceError, NonFiniteError, NormalizationError, ShapeError
from .tensor import Tensor, current_tape

_GELU_C = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation


class MacCounter:
    def __init__(self):
        self.macs = 0


_counters = threading.local()


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates performed by ``matmul`` inside the block."""
    stack = getattr(_counters, "stack", None)
    if stack is None:
        stack = _counters.stack = []
    counter = MacCounter()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _add_macs(n: int) -> None:
    stack = getattr(_counters, "stack", None)
    if stack:
        for c in stack:
            c.macs += n


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e))
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) in the overflow-free ``max(x,0) + log1p(e^-|x|)`` form."""
    d = x.data
    y = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))

    def back(g):
        e = np.exp(-np.abs(d))
        sig = np.where(d >= 0, 1 / (1 + e), e / (1 + e))
        return (g * sig,)

    return _result(y, (x,), back)


def gelu(x: Tensor) -> Tensor:
    d = x.data
    u = _GELU_C * (d + 0.044715 * (d * d * d))
    t = np.tanh(u)
    y = 0.5 * d * (1 + t)

    def back(g):
        du = _GELU_C * (1 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1 + t) + 0.5 * d * (1 - t * t) * du),)

    return _result(y, (x,), back)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    if np.isinf(y).any():
        raise NonFiniteError("exp overflow")
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    d = x.data
    if (d <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _result(np.log(d), (x,), lambda g: (g / d,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    ax = _norm_axis(axis, x.ndim)
    if ax is None:
        y = x.data.reshape(-1).sum()
        y = y.reshape((1,) * x.ndim) if keepdims else y
    else:
        y = x.data.sum(axis=ax, keepdims=keepdims)

    def back(g):
        if ax is None:
            return (np.broadcast_to(g.reshape(()) if g.ndim else g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(y, dtype=x.dtype), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    n = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    src = x.shape
    return _result(y, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """``x[..., start:stop, ...]`` along a single axis."""
    axis %= x.ndim
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of extent {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _result(x.data[idx], (x,), back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty sequence")
    axis %= xs[0].ndim
    try:
        y = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _result(y, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` indexed by integer ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather needs a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather ids out of range for table of {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), back)


# ---------------------------------------------------------------------------
# linear algebra and normalization


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # [..., m, k] @ [k, n] as one GEMM instead of a loop over the batch
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return np.matmul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data
    y = _mm(ad, bd)
    _add_macs(y.size * ad.shape[-1])

    def back(g):
        ga = gb = None
        if a.requires_grad:
            if ad.ndim == 2 and g.ndim > 2:
                # shared left operand: fold the batch into the contraction
                m = ad.shape[0]
                g2 = np.moveaxis(g, -2, 0).reshape(m, -1)
                b2 = np.moveaxis(np.broadcast_to(bd, g.shape[:-2] + bd.shape[-2:]), -2, 0)
                ga = g2 @ b2.reshape(bd.shape[-2], -1).T
            else:
                ga = unbroadcast(_mm(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and g.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(y, (a, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilised softmax; -inf entries map to exactly zero."""
    d = x.data
    m = d.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateSliceError("softmax slice has every entry masked")
    e = np.exp(d - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last extent {n}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    y = xhat * gd + beta.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, n)
        ggamma = (flat * xhat.reshape(-1, n)).sum(axis=0)
        gbeta = flat.sum(axis=0)
        return gx, ggamma, gbeta

    return _result(y.astype(d.dtype, copy=False), (x, gamma, beta), back)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale every vector along the last axis to unit length."""
    d = x.data
    norm = np.sqrt((d * d).sum(axis=-1, keepdims=True))
    if (norm < eps).any():
        raise NormalizationError(f"cannot normalize a vector with norm below {eps}")
    y = d / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (x,), back)

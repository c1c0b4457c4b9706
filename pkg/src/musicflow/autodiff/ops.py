"""
Differentiable operators.

Each operator computes its result with numpy and, when any input requires a
gradient and a tape is active, records an adjoint closure. Shapes must match
exactly except for leading-axis expansion: a shape that is a suffix of the other
operand's shape is repeated over the missing leading axes.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from musicflow.autodiff.array import Adjoint, Array, Tape
from musicflow.utils.errors import ShapeError

_GELU_K = math.sqrt(2.0 / math.pi)


def _result(op: str, data: np.ndarray, inputs: tuple[Array, ...], adjoint: Adjoint) -> Array:
    out = Array(data, requires_grad=any(x.requires_grad for x in inputs))
    tape = Tape.active()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, adjoint)
    return out


def _check_expand(op: str, a: Array, b: Array) -> None:
    if a.shape == b.shape:
        return
    short, long = (a.shape, b.shape) if a.ndim < b.ndim else (b.shape, a.shape)
    if len(short) == len(long) or long[len(long) - len(short) :] != short:
        raise ShapeError(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# Arithmetic
def add(a: Array, b: Array) -> Array:
    _check_expand("add", a, b)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result("add", a.data + b.data, (a, b), adjoint)


def sub(a: Array, b: Array) -> Array:
    _check_expand("sub", a, b)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _result("sub", a.data - b.data, (a, b), adjoint)


def mul(a: Array, b: Array) -> Array:
    _check_expand("mul", a, b)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), adjoint)


def scale(a: Array, c: float) -> Array:
    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * c,)

    return _result("scale", a.data * a.dtype.type(c), (a,), adjoint)


def shift(a: Array, c: float) -> Array:
    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (g,)

    return _result("shift", a.data + a.dtype.type(c), (a,), adjoint)


def matmul(a: Array, b: Array) -> Array:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    a_batch, b_batch = a.shape[:-2], b.shape[:-2]
    short, long = sorted((a_batch, b_batch), key=len)
    if long[len(long) - len(short) :] != short:
        raise ShapeError("matmul", a.shape, b.shape)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g @ _swap(b.data), a.shape), _reduce_to(_swap(a.data) @ g, b.shape)

    return _result("matmul", a.data @ b.data, (a, b), adjoint)


# Structure
def concat(arrays: Sequence[Array], axis: int = -1) -> Array:
    if not arrays:
        raise ShapeError("concat")
    first = arrays[0]
    ax = axis % first.ndim
    for other in arrays[1:]:
        if other.ndim != first.ndim or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(first.shape, other.shape)) if i != ax
        ):
            raise ShapeError("concat", *(x.shape for x in arrays))
    bounds = np.cumsum([x.shape[ax] for x in arrays])[:-1]

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(g, bounds, axis=ax))

    return _result("concat", np.concatenate([x.data for x in arrays], axis=ax), tuple(arrays), adjoint)


def reshape(a: Array, shape: tuple[int, ...]) -> Array:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(a.shape),)

    return _result("reshape", data, (a,), adjoint)


def transpose(a: Array, axes: tuple[int, ...]) -> Array:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return _result("transpose", np.transpose(a.data, axes), (a,), adjoint)


def expand(a: Array, shape: tuple[int, ...]) -> Array:
    """Explicitly repeat size-1 axes of `a` up to `shape` (same rank)."""
    if a.ndim != len(shape) or any(s != 1 and s != t for s, t in zip(a.shape, shape)):
        raise ShapeError("expand", a.shape, shape)
    repeated = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.sum(axis=repeated, keepdims=True),)

    return _result("expand", np.broadcast_to(a.data, shape).copy(), (a,), adjoint)


# Reductions
def sum(a: Array, axis: int | tuple[int, ...] | None = None) -> Array:  # noqa: A001
    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", np.asarray(a.data.sum(axis=axis)), (a,), adjoint)


def mean(a: Array, axis: int | tuple[int, ...] | None = None) -> Array:
    axes = tuple(range(a.ndim)) if axis is None else (axis,) if isinstance(axis, int) else axis
    count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis), 1.0 / count)


def mean_pool(a: Array, n_out: int, axis: int = -2) -> Array:
    """Average `a` over `n_out` contiguous, near-equal segments of `axis`."""
    ax = axis % a.ndim
    length = a.shape[ax]
    if not 1 <= n_out <= length:
        raise ShapeError("mean_pool", a.shape, (n_out,))
    pool = np.zeros((n_out, length), dtype=a.dtype)
    for i, segment in enumerate(np.array_split(np.arange(length), n_out)):
        pool[i, segment] = 1.0 / len(segment)

    moved = np.moveaxis(a.data, ax, -1)
    data = np.moveaxis(moved @ pool.T, -1, ax)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.moveaxis(np.moveaxis(g, ax, -1) @ pool, -1, ax),)

    return _result("mean_pool", data, (a,), adjoint)


# Nonlinearities
def softmax(a: Array, axis: int = -1) -> Array:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (a,), adjoint)


def gelu(a: Array) -> Array:
    x = a.data
    inner = _GELU_K * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        d_inner = _GELU_K * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner),)

    return _result("gelu", y, (a,), adjoint)


def log(a: Array) -> Array:
    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (g / a.data,)

    return _result("log", np.log(a.data), (a,), adjoint)


def layer_norm(a: Array, gamma: Array | None = None, beta: Array | None = None, eps: float = 1e-5) -> Array:
    """Normalize over the last axis, then apply the optional affine (gamma, beta)."""
    d = a.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError("layer_norm", a.shape, p.shape)

    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data

    inputs = tuple(x for x in (a, gamma, beta) if x is not None)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, ...]:
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads: list[np.ndarray] = [dx]
        if gamma is not None:
            grads.append(_reduce_to(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_reduce_to(g, beta.shape))
        return tuple(grads)

    return _result("layer_norm", y, inputs, adjoint)


# Sequence ops
def conv1d_depthwise(a: Array, weight: Array) -> Array:
    """
    Same-padded depthwise convolution along the frame axis.

    Args:
        a: (..., T, C) input.
        weight: (K, C) taps, K odd; output[t, c] = sum_k weight[k, c] * a[t + k - K // 2, c].
    """
    k, c = weight.shape
    if k % 2 == 0 or a.ndim < 2 or a.shape[-1] != c:
        raise ShapeError("conv1d_depthwise", a.shape, weight.shape)
    pad = k // 2

    def correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
        widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
        windows = sliding_window_view(np.pad(x, widths), k, axis=-2)
        return np.einsum("...tck,kc->...tc", windows, w)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (0, 0)]
        windows = sliding_window_view(np.pad(a.data, widths), k, axis=-2)
        grad_w = np.einsum("nck,nc->kc", windows.reshape(-1, c, k), g.reshape(-1, c))
        return correlate(g, weight.data[::-1]), grad_w

    return _result("conv1d_depthwise", correlate(a.data, weight.data), (a, weight), adjoint)


def embedding(table: Array, indices: np.ndarray) -> Array:
    """Gather rows of `table` (V, d) at integer `indices` of any shape."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer) or table.ndim != 2:
        raise ShapeError("embedding", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding (index out of range)", table.shape, idx.shape)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _result("embedding", table.data[idx], (table,), adjoint)

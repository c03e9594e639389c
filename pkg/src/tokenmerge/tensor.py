"""Dense array primitives shared by the rest of the package.

Arrays are plain row-major ``numpy.ndarray`` objects.  The helpers here add
the contracts numpy leaves open: shape errors with readable messages,
lowest-index tie-breaking for every selection, and a named deterministic
generator for reproducible initialisation.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray

DEFAULT_DTYPE = np.float32
ORACLE_DTYPE = np.float64

# PCG64 is numpy's documented default bit generator; its stream is fixed for a
# given seed across platforms.
RNG_ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))


def asarray(x, dtype=None) -> Tensor:
    return np.ascontiguousarray(np.asarray(x, dtype=dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., M, K] @ [..., K, N]`` with broadcasting."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner extents differ: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(
            f"matmul batch extents not broadcastable: {a.shape[:-2]} vs {b.shape[:-2]}"
        ) from None
    return np.matmul(a, b)


def sigmoid(x: Tensor) -> Tensor:
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}
_UNARY = {
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": np.exp,
}


def elementwise(op: str, *operands) -> Tensor:
    """Apply ``op`` per element.

    Binary ops take two operands of equal shape (or one scalar); ``scale``
    takes a tensor and a scalar factor.  Division by zero yields +-inf.
    """
    if op in _UNARY:
        (x,) = operands
        return _UNARY[op](np.asarray(x))
    if op == "scale":
        x, factor = operands
        if np.ndim(factor) != 0:
            raise ValueError("scale factor must be a scalar")
        return np.asarray(x) * factor
    if op in _BINARY:
        a, b = operands
        if np.ndim(a) and np.ndim(b) and np.shape(a) != np.shape(b):
            raise ValueError(f"{op}: operand shapes differ: {np.shape(a)} vs {np.shape(b)}")
        with np.errstate(divide="ignore", invalid="ignore"):
            return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce(op: str, t: Tensor, axis: int = -1):
    """Reduce along ``axis``.  ``max`` returns ``(values, argmax)``."""
    t = np.asarray(t)
    if t.ndim == 0:
        raise ValueError("cannot reduce a 0-d tensor")
    if not -t.ndim <= axis < t.ndim:
        raise ValueError(f"axis {axis} out of range for shape {t.shape}")
    if t.shape[axis] == 0:
        raise ValueError("reduction over an empty axis")
    if op == "sum":
        return t.sum(axis=axis)
    if op == "mean":
        return t.mean(axis=axis)
    if op == "max":
        idx = np.argmax(t, axis=axis)  # first occurrence on ties
        return np.take_along_axis(t, np.expand_dims(idx, axis), axis).squeeze(axis), idx
    raise ValueError(f"unknown reduction {op!r}")


def argmax(t: Tensor, axis: int = -1) -> Tensor:
    return reduce("max", t, axis)[1]


def topk(t: Tensor, k: int, axis: int = -1):
    """The ``k`` largest entries along ``axis`` in descending order.

    Equal values keep their original order, so the lower index wins a tie.
    """
    t = np.asarray(t)
    n = t.shape[axis]
    if k > n:
        raise ValueError(f"topk: k={k} exceeds extent {n}")
    if k < 0:
        raise ValueError("topk: k must be non-negative")
    order = np.argsort(-t, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    return np.take_along_axis(t, idx, axis), idx


def one_hot(indices: Tensor, depth: int, dtype=DEFAULT_DTYPE) -> Tensor:
    indices = np.asarray(indices)
    out = np.zeros(indices.shape + (depth,), dtype=dtype)
    np.put_along_axis(out, indices[..., None], 1, axis=-1)
    return out


def _check_indices(indices, extent):
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= extent):
        raise IndexError(f"index out of range for axis of length {extent}")
    return indices


def gather(t: Tensor, indices, axis: int = 0) -> Tensor:
    t = np.asarray(t)
    return np.take(t, _check_indices(indices, t.shape[axis]), axis=axis)


def scatter_add(t: Tensor, indices, values, axis: int = 0) -> Tensor:
    """Return a copy of ``t`` with ``values`` accumulated at ``indices`` along ``axis``."""
    t = np.array(t, copy=True)
    indices = _check_indices(indices, t.shape[axis])
    moved = np.moveaxis(t, axis, 0)
    np.add.at(moved, indices, np.moveaxis(np.asarray(values), axis, 0))
    return t


def gather_scatter(t: Tensor, indices, mode: str, values=None, axis: int = 0) -> Tensor:
    if mode == "gather":
        return gather(t, indices, axis)
    if mode == "scatter-add":
        if values is None:
            raise ValueError("scatter-add needs values")
        return scatter_add(t, indices, values, axis)
    raise ValueError(f"unknown mode {mode!r}")


def all_finite(t: Tensor) -> bool:
    return bool(np.isfinite(t).all())

"""Tape-based reverse-mode differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded when at
least one input requires a gradient.  ``Tape.backward`` replays the record
in reverse.  Outside a tape every op is evaluated eagerly with no recording,
which is what inference uses.

Two rules are not ordinary derivatives:

* :func:`stop_gradient` returns a parentless node with the same value.
* :func:`ste` returns the hard tensor as its value and hands the incoming
  gradient to the soft input unchanged.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Node:
    """A value in the computation plus its gradient bookkeeping."""

    __slots__ = ("value", "requires_grad", "grad", "parents", "name")
    __array_priority__ = 100  # make ndarray <op> Node defer to Node

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.grad = None
        self.parents: tuple = ()
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of one forward pass.

    Use as a context manager; ``backward`` may be called once.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._used = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def record(self, out: Node, parents: tuple, backward: Callable):
        if self._used:
            raise RuntimeError("tape already consumed by backward()")
        self.records.append(_Record(out, parents, backward))

    def backward(self, loss: Node, params: Iterable[Node] = ()) -> None:
        """Populate ``.grad`` on every node reachable from ``loss``.

        Leaf gradients are assigned, not accumulated across tapes.  Leaves in
        ``params`` that did not take part get zero gradients.
        """
        if self._used:
            raise RuntimeError("backward() called twice on the same tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        self._used = True

        leaves = {}
        for rec in self.records:
            rec.out.grad = None
            for p in rec.parents:
                if p.requires_grad and p.is_leaf:
                    leaves[id(p)] = p
        for p in params:
            leaves[id(p)] = p
        for p in leaves.values():
            p.grad = None

        loss.grad = np.ones_like(loss.value)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for p, pg in zip(rec.parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.value.dtype)
                if pg.shape != p.value.shape:
                    pg = _unbroadcast(pg, p.value.shape)
                p.grad = pg if p.grad is None else p.grad + pg

        for p in leaves.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.value)


def backward(loss: Node, params: Iterable[Node] = ()) -> None:
    tape = current_tape()
    if tape is None:
        raise RuntimeError("no active tape")
    tape.backward(loss, params)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(value, parents: Sequence[Node], backward: Callable) -> Node:
    out = Node(value)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        tape.record(out, out.parents, backward)
    return out


def _scalar_or_node(x):
    # Python scalars stay scalars so float32 arrays are not promoted.
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return x
    return as_node(x)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Node:
    a, b = _scalar_or_node(a), _scalar_or_node(b)
    if not isinstance(a, Node):
        a, b = b, a
    if not isinstance(b, Node):
        return _make(a.value + b, (a,), lambda g: (g,))
    return _make(a.value + b.value, (a, b), lambda g: (g, g))


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def sub(a, b) -> Node:
    a, b = _scalar_or_node(a), _scalar_or_node(b)
    if not isinstance(b, Node):
        return _make(a.value - b, (a,), lambda g: (g,))
    if not isinstance(a, Node):
        return _make(a - b.value, (b,), lambda g: (-g,))
    return _make(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = _scalar_or_node(a), _scalar_or_node(b)
    if not isinstance(a, Node):
        a, b = b, a
    if not isinstance(b, Node):
        c = b
        return _make(a.value * c, (a,), lambda g: (g * c,))
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Node:
    a, b = _scalar_or_node(a), _scalar_or_node(b)
    if not isinstance(b, Node):
        c = b
        return _make(a.value / c, (a,), lambda g: (g / c,))
    if not isinstance(a, Node):
        a = Node(np.asarray(a, dtype=b.value.dtype))
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _make(out, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = T.matmul(av, bv)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                # shared weight: fold the batch dims into one contraction
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), bw)


def maximum(a, b) -> Node:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_node(a), as_node(b)
    pick_a = a.value >= b.value
    out = np.where(pick_a, a.value, b.value)
    return _make(out, (a, b), lambda g: (g * pick_a, g * ~pick_a))


# ------------------------------------------------------------------ unary


def relu(x) -> Node:
    x = as_node(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Node:
    x = as_node(x)
    s = T.sigmoid(x.value).astype(x.dtype, copy=False)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def exp(x) -> Node:
    x = as_node(x)
    e = np.exp(x.value)
    return _make(e, (x,), lambda g: (g * e,))


def log(x) -> Node:
    x = as_node(x)
    xv = x.value
    return _make(np.log(xv), (x,), lambda g: (g / xv,))


def tanh(x) -> Node:
    x = as_node(x)
    t = np.tanh(x.value)
    return _make(t, (x,), lambda g: (g * (1 - t * t),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x) -> Node:
    """GELU, tanh approximation."""
    x = as_node(x)
    xv = x.value
    x2 = xv * xv
    inner = _GELU_C * (xv + 0.044715 * x2 * xv)
    t = np.tanh(inner)
    out = 0.5 * xv * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + t) + 0.5 * xv * (1 - t * t) * dinner),)

    return _make(out.astype(xv.dtype, copy=False), (x,), bw)


# -------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims=False) -> Node:
    x = as_node(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(x.value.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False) -> Node:
    x = as_node(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return div(sum_(x, axis, keepdims), float(n))


# ------------------------------------------------------------------ shapes


def reshape(x, shape) -> Node:
    x = as_node(x)
    orig = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes=None) -> Node:
    x = as_node(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1, a2) -> Node:
    x = as_node(x)
    return _make(np.swapaxes(x.value, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def getitem(x, idx) -> Node:
    x = as_node(x)
    if isinstance(idx, Node):
        idx = idx.value

    def bw(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.value[idx], (x,), bw)


def take_along_axis(x, indices, axis) -> Node:
    x = as_node(x)
    value = np.take_along_axis(x.value, np.asarray(indices), axis)
    indices = np.broadcast_to(indices, value.shape)

    def bw(g):
        out = np.zeros_like(x.value)
        # indices along axis may repeat, so accumulate
        idx = list(np.indices(indices.shape, sparse=True))
        idx[axis] = indices
        np.add.at(out, tuple(idx), g)
        return (out,)

    return _make(value, (x,), bw)


def concat(xs: Sequence, axis: int = 0) -> Node:
    xs = [as_node(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), bw)


def where(cond, a, b) -> Node:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_node(a), as_node(b)
    return _make(
        np.where(cond, a.value, b.value),
        (a, b),
        lambda g: (np.where(cond, g, 0), np.where(cond, 0, g)),
    )


def masked_fill(x, mask, value: float) -> Node:
    """Replace entries where ``mask`` holds by ``value``; those entries get no gradient."""
    x = as_node(x)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.value)
    return _make(out, (x,), lambda g: (np.where(mask, 0, g),))


# ------------------------------------------------------------ composites


def softmax(x, axis=-1) -> Node:
    x = as_node(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def log_softmax(x, axis=-1) -> Node:
    x = as_node(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def layer_norm(x, weight, bias, eps: float = 1e-6) -> Node:
    """Normalise over the last axis, then scale and shift."""
    x, weight, bias = as_node(x), as_node(weight), as_node(bias)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.value + bias.value
    n = x.shape[-1]

    def bw(g):
        gw = g * weight.value
        gx = inv / n * (n * gw - gw.sum(-1, keepdims=True) - xhat * (gw * xhat).sum(-1, keepdims=True))
        return gx, g * xhat, g

    return _make(out.astype(x.dtype, copy=False), (x, weight, bias), bw)


def cross_entropy(logits, labels) -> Node:
    """Mean softmax cross-entropy for integer ``labels``."""
    labels = np.asarray(labels)
    lp = log_softmax(logits, axis=-1)
    picked = take_along_axis(lp, labels[:, None], axis=-1)
    return neg(mean(picked))


# ------------------------------------------------------ gradient routing


def stop_gradient(x) -> Node:
    """Same value, no parents: nothing upstream receives gradient through it."""
    x = as_node(x)
    return Node(x.value)


def ste(soft, hard) -> Node:
    """Straight-through node: forward value is ``hard``, gradient goes to ``soft``.

    Equivalent to ``soft + stop_gradient(hard - soft)`` except that the value
    is exactly ``hard`` rather than a rounded sum.
    """
    soft = as_node(soft)
    hard = np.asarray(hard.value if isinstance(hard, Node) else hard)
    if hard.shape != soft.shape:
        raise ValueError(f"ste: soft {soft.shape} and hard {hard.shape} differ in shape")
    return _make(hard.astype(soft.dtype, copy=True), (soft,), lambda g: (g,))


def parameter(value, name: str | None = None) -> Node:
    return Node(np.array(value, copy=True), requires_grad=True, name=name)

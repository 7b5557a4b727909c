"""Reverse-mode differentiation over a small, fixed set of array ops.

Every op returns a :class:`Node` that remembers its parents and how to push a
cotangent back to them. :func:`backward` orders the graph reachable from the
loss (the tape) and runs the pullbacks in reverse.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..isotonic import isotonize


class NumericalError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class Node:
    __slots__ = ("value", "grad", "parents", "pullback")

    def __init__(self, value, parents=(), pullback: Callable | None = None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.pullback = pullback

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


def leaf(value) -> Node:
    return Node(value)


def _node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def tape(loss: Node) -> list[Node]:
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node on the tape."""
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    order = tape(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.pullback is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.pullback(node.grad)):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def forward_backward(
    loss_fn: Callable[[Mapping[str, Node]], Node], params: Mapping[str, np.ndarray]
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` on leaf copies of ``params`` and return (loss, grads)."""
    leaves = {k: leaf(v) for k, v in params.items()}
    loss = loss_fn(leaves)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    backward(loss)
    grads = {}
    for k, node in leaves.items():
        grads[k] = np.zeros_like(node.value) if node.grad is None else node.grad
    return value, grads


# -- elementwise and linear ops ------------------------------------------------


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    return Node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    return Node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    a, b = _node(a), _node(b)
    return Node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def matmul(a, b) -> Node:
    a, b = _node(a), _node(b)
    return Node(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def affine(x, w, b) -> Node:
    """``x @ w + b`` for a batch ``x`` of shape ``(n, d_in)``."""
    x, w, b = _node(x), _node(w), _node(b)
    return Node(
        x.value @ w.value + b.value,
        (x, w, b),
        lambda g: (g @ w.value.T, x.value.T @ g, g.sum(axis=0)),
    )


def einsum(spec: str, a, b) -> Node:
    """Two-operand einsum; no index may repeat within one operand."""
    a, b = _node(a), _node(b)
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")

    def pull(g):
        return (
            np.einsum(f"{out},{sb}->{sa}", g, b.value) if sa else None,
            np.einsum(f"{sa},{out}->{sb}", a.value, g) if sb else None,
        )

    return Node(np.einsum(spec, a.value, b.value), (a, b), pull)


def exp(x) -> Node:
    x = _node(x)
    v = np.exp(x.value)
    return Node(v, (x,), lambda g: (g * v,))


def square(x) -> Node:
    x = _node(x)
    return Node(x.value**2, (x,), lambda g: (2.0 * g * x.value,))


def elu(x) -> Node:
    x = _node(x)
    neg = x.value < 0
    e = np.exp(np.minimum(x.value, 0.0))
    return Node(np.where(neg, e - 1.0, x.value), (x,), lambda g: (np.where(neg, g * e, g),))


def relu(x) -> Node:
    """Positive part ``(x)_+``; the subgradient at 0 is taken as 0."""
    x = _node(x)
    pos = x.value > 0
    return Node(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))


def softmax(x, axis: int = -1) -> Node:
    x = _node(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def pull(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Node(s, (x,), pull)


def reshape(x, shape) -> Node:
    x = _node(x)
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def total(x) -> Node:
    x = _node(x)
    return Node(x.value.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Node:
    x = _node(x)
    n = x.value.size
    return Node(x.value.mean(), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def dropout(x, rate: float, rng: np.random.Generator | None) -> Node:
    """Inverted dropout with a mask drawn from ``rng``; identity when ``rng`` is None."""
    if rng is None or rate <= 0:
        return _node(x)
    x = _node(x)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, mask)


# -- quantile-specific ops -----------------------------------------------------


def pinball(q, y, taus) -> Node:
    """Mean over rows of the pinball loss summed over levels.

    ``q`` is ``(n, m)``, ``y`` is ``(n,)``, ``taus`` is ``(m,)``. The subgradient
    at ``y == q`` is taken from the ``y < q`` branch.
    """
    q = _node(q)
    taus = np.asarray(taus, dtype=float)
    r = np.asarray(y, dtype=float)[:, None] - q.value
    above = r > 0
    n = r.shape[0]
    value = np.where(above, taus * r, (taus - 1.0) * r).sum() / n
    return Node(value, (q,), lambda g: (g * np.where(above, -taus, 1.0 - taus) / n,))


def crossing_hinge(q, margins) -> Node:
    """Mean over rows of ``sum_{i<k} (q_i - q_k + margins[i, k])_+``."""
    q = _node(q)
    margins = np.asarray(margins, dtype=float)
    m = q.shape[-1]
    iu, ku = np.triu_indices(m, k=1)
    d = q.value[:, iu] - q.value[:, ku] + margins[iu, ku]
    act = d > 0
    n = q.shape[0]

    def pull(g):
        w = g * act / n
        out = np.zeros(q.shape)
        np.add.at(out.T, iu, w.T)
        np.add.at(out.T, ku, -w.T)
        return (out,)

    return Node(np.where(act, d, 0.0).sum() / n, (q,), pull)


def isotonic_layer(q, kind: str, anchor: int | None = None) -> Node:
    """Row-wise isotonization with the operator's backward map as its pullback."""
    q = _node(q)
    res = isotonize(q.value, kind, anchor)
    return Node(res.values, (q,), lambda g: (res.backward.vjp(g),))

"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Each ``Var`` remembers the vector-Jacobian products that connect it to its
inputs.  ``backward`` walks the recorded graph in reverse topological order
and accumulates gradients into every node that requires them.
"""
from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "grad", "parents", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents  # tuple of (Var, vjp)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def leaf(value) -> Var:
    """A differentiable input."""
    return Var(value, requires_grad=True)


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(value)


def _node(value, pairs):
    pairs = tuple((p, f) for p, f in pairs if p.requires_grad)
    return Var(value, pairs)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = const(a), const(b)
    return _node(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b):
    a, b = const(a), const(b)
    return _node(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


def mul(a, b):
    a, b = const(a), const(b)
    return _node(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def matmul(a, b):
    """2-D matrix product."""
    a, b = const(a), const(b)
    return _node(a.value @ b.value, [
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ])


def linear(x, W, b=None):
    """``x @ W.T + b`` for a batch ``x`` of shape (B, n_in)."""
    x, W = const(x), const(W)
    out = x.value @ W.value.T
    pairs = [(x, lambda g: g @ W.value), (W, lambda g: g.T @ x.value)]
    if b is not None:
        b = const(b)
        out = out + b.value
        pairs.append((b, lambda g: g.sum(axis=0)))
    return _node(out, pairs)


def tanh(a):
    a = const(a)
    out = np.tanh(a.value)
    return _node(out, [(a, lambda g: g * (1.0 - out * out))])


def relu(a):
    a = const(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)])


def square(a):
    a = const(a)
    return _node(a.value * a.value, [(a, lambda g: 2.0 * g * a.value)])


def sum_all(a):
    a = const(a)
    return _node(np.sum(a.value), [(a, lambda g: np.broadcast_to(g, a.shape).copy())])


def mean_all(a):
    a = const(a)
    n = a.value.size
    return _node(np.mean(a.value), [(a, lambda g: np.broadcast_to(g / n, a.shape).copy())])


def concat(items, axis=-1):
    items = [const(v) for v in items]
    out = np.concatenate([v.value for v in items], axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in items])
    pairs = []
    for i, v in enumerate(items):
        lo, hi = bounds[i], bounds[i + 1]

        def vjp(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        pairs.append((v, vjp))
    return _node(out, pairs)


def index(a, idx):
    a = const(a)

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return full

    return _node(a.value[idx], [(a, vjp)])


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, seed=None):
    """Accumulate d(root)/d(node) into ``node.grad`` for every node on the tape.

    Gradients from an earlier call are cleared first, so the same tape can be
    swept several times with different seeds.
    """
    order = _topo(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=float)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib

"""A small reverse-mode differentiation tape over numpy arrays.

Only the handful of ops the ELBO needs are provided. Every op records its
parents and a closure mapping the output adjoint to parent adjoints;
``backward`` walks the graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Var:
    __slots__ = ("value", "grad", "_parents", "_backward")
    __array_ufunc__ = None  # make numpy defer to the reflected Var operators

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # arithmetic
    def __add__(self, other):
        other = _lift(other)
        out = self.value + other.value

        def back(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))
        return Var(out, (self, other), back)

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        out = self.value - other.value

        def back(g):
            return (_unbroadcast(g, self.shape), -_unbroadcast(g, other.shape))
        return Var(out, (self, other), back)

    def __rsub__(self, other):
        return _lift(other) - self

    def __rmatmul__(self, other):
        return _lift(other) @ self

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value

        def back(g):
            return (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))
        return Var(a * b, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.value, other.value

        def back(g):
            return (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / b**2, b.shape))
        return Var(a / b, (self, other), back)

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value

        def back(g):
            if a.ndim == 1 and b.ndim == 2:
                return (b @ g, np.outer(a, g))
            if a.ndim == 2 and b.ndim == 1:
                return (np.outer(g, b), a.T @ g)
            return (g @ b.T, a.T @ g)
        return Var(a @ b, (self, other), back)

    @property
    def T(self):
        return Var(self.value.T, (self,), lambda g: (g.T,))

    def reshape(self, *shape):
        orig = self.shape
        return Var(self.value.reshape(*shape), (self,), lambda g: (g.reshape(orig),))

    def __getitem__(self, idx):
        orig = self.shape

        def back(g):
            full = np.zeros(orig)
            np.add.at(full, idx, g)
            return (full,)
        return Var(self.value[idx], (self,), back)

    def sum(self):
        orig = self.shape
        return Var(self.value.sum(), (self,), lambda g: (np.broadcast_to(g, orig).copy(),))

    def backward(self):
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, pg in zip(node._parents, node._backward(node.grad)):
                parent.grad = pg if parent.grad is None else parent.grad + pg


def _lift(x):
    return x if isinstance(x, Var) else Var(x)


def tanh(x: Var) -> Var:
    t = np.tanh(x.value)
    return Var(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Var) -> Var:
    e = np.exp(x.value)
    return Var(e, (x,), lambda g: (g * e,))


def log(x: Var) -> Var:
    v = x.value
    return Var(np.log(v), (x,), lambda g: (g / v,))


def softplus(x: Var) -> Var:
    v = x.value
    out = np.logaddexp(0.0, v)
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return Var(out, (x,), lambda g: (g * sig,))


def square(x: Var) -> Var:
    v = x.value
    return Var(v * v, (x,), lambda g: (2.0 * g * v,))


def concat(xs, axis=-1) -> Var:
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return Var(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), back)


_MASKS = {}


def tril_strict(x: Var) -> Var:
    mask = _MASKS.get(x.shape)
    if mask is None:
        mask = _MASKS[x.shape] = np.tril(np.ones(x.shape), -1)
    return Var(x.value * mask, (x,), lambda g: (g * mask,))


def diag_embed(v: Var) -> Var:
    return Var(np.diag(v.value), (v,), lambda g: (np.diag(g).copy(),))

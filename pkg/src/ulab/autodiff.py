"""Tape-free reverse-mode differentiation over numpy arrays.

Every op accepts plain arrays or :class:`Var` nodes. When no operand is a
``Var`` the op reduces to the bare numpy call, so the same model code runs
for inference (no graph) and inside :func:`ulab.nn.grad` (graph built).
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "op")
    __array_priority__ = 1000  # make ndarray <op> Var dispatch to Var

    def __init__(self, value, parents=(), backward_fn=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"

    def backward(self, seed=None):
        """Accumulate d(self)/d(node) into ``.grad`` of every ancestor."""
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if isinstance(p, Var) and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node.backward_fn is None:
                if node.grad is not None and not np.isfinite(node.grad).all():
                    raise NumericError("backward", "non-finite gradient reached a leaf")
                continue
            if node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for p, g in zip(node.parents, grads):
                if not isinstance(p, Var) or g is None:
                    continue
                p.grad = g if p.grad is None else p.grad + g

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def value(x):
    return x.value if isinstance(x, Var) else x


def is_var(*xs):
    return any(isinstance(x, Var) for x in xs)


def _node(out, parents, backward_fn, op):
    if not np.isfinite(out).all():
        raise NumericError(op)
    return Var(out, parents, backward_fn, op)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise binary -----------------------------------------------------

def add(a, b):
    if not is_var(a, b):
        return np.add(a, b)
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _node(av + bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    if not is_var(a, b):
        return np.subtract(a, b)
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _node(av - bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    if not is_var(a, b):
        return np.multiply(a, b)
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)

    def backward(g):
        return (_unbroadcast(g * bv, sa) if isinstance(a, Var) else None,
                _unbroadcast(g * av, sb) if isinstance(b, Var) else None)

    return _node(av * bv, (a, b), backward, "mul")


def div(a, b):
    if not is_var(a, b):
        return np.divide(a, b)
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * out / bv, sb)), "div")


def matmul(a, b):
    if not is_var(a, b):
        return np.matmul(a, b)
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def backward(g):
        ga = gb = None
        if isinstance(a, Var):
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if isinstance(b, Var):
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _node(av @ bv, (a, b), backward, "matmul")


# -- elementwise unary ------------------------------------------------------

def tanh(x):
    if not is_var(x):
        return np.tanh(x)
    out = np.tanh(x.value)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x):
    if not is_var(x):
        return np.maximum(x, 0.0)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(v):
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0, e) / (1.0 + e)


def sigmoid(x):
    if not is_var(x):
        return _sigmoid(np.asarray(x, dtype=np.float64))
    out = _sigmoid(x.value)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _softplus(v):
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def softplus(x):
    if not is_var(x):
        return _softplus(np.asarray(x, dtype=np.float64))
    s = _sigmoid(x.value)
    return _node(_softplus(x.value), (x,), lambda g: (g * s,), "softplus")


def exp(x):
    if not is_var(x):
        return np.exp(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log1p(x):
    if not is_var(x):
        return np.log1p(x)
    xv = x.value
    return _node(np.log1p(xv), (x,), lambda g: (g / (1.0 + xv),), "log1p")


def square(x):
    if not is_var(x):
        return np.square(x)
    xv = x.value
    return _node(xv * xv, (x,), lambda g: (2.0 * g * xv,), "square")


def absolute(x):
    """|x| with subgradient sign(x) (zero at the kink)."""
    if not is_var(x):
        return np.abs(x)
    xv = x.value
    return _node(np.abs(xv), (x,), lambda g: (g * np.sign(xv),), "abs")


def clip(x, lo, hi):
    """Clamp into [lo, hi]; gradient is zero where the clamp is active."""
    if not is_var(x):
        return np.clip(x, lo, hi)
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    return _node(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,), "clip")


# -- reductions and shape ---------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001
    if not is_var(x):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.value.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    if not is_var(x):
        return np.mean(x, axis=axis, keepdims=keepdims)
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    if not is_var(x):
        return np.reshape(x, shape)
    old = x.value.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x):
    if not is_var(x):
        return np.swapaxes(x, -1, -2)
    return _node(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def getitem(x, idx):
    if not is_var(x):
        return x[idx]
    shape = x.value.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.value[idx], (x,), backward, "getitem")


def segment_sum(x, sizes):
    """Sum consecutive row blocks of lengths ``sizes`` along axis 0."""
    sizes = np.asarray(sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    if not is_var(x):
        return np.add.reduceat(x, starts, axis=0)
    return _node(np.add.reduceat(x.value, starts, axis=0), (x,),
                 lambda g: (np.repeat(g, sizes, axis=0),), "segment_sum")


def custom(x, out, derivative, op):
    """Wrap an elementwise function whose derivative is known in closed form."""
    if not is_var(x):
        return out
    return _node(out, (x,), lambda g: (g * derivative,), op)

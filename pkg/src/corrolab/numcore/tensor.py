"""Reverse-mode accumulation over a small closed set of float64 array ops.

Every value is a float64 ndarray wrapped in a Tensor node. Ops build a
graph; backward() walks it in reverse topological order. The op set is
deliberately small: affine/matmul, elementwise arithmetic, exp, log, tanh,
relu, sqrt, square, softplus, reductions, softmax, logsumexp, and a few
shape ops (concat, reshape, row slice/repeat) needed by the model zoo.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bw = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    # operator sugar; constants are coerced on the fly
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data, parents, bw):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bw = bw
    return out


def _acc(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def custom(data, parents, bw):
    """Build a graph node with a hand-written backward closure.

    bw receives the upstream gradient and must accumulate into the parents
    via acc(). Used for fused ops whose analytic gradients are verified by
    finite differences in the test suite.
    """
    return _node(data, parents, bw)


def acc(t, g):
    _acc(t, g)


def backward(root):
    """Accumulate gradients of a scalar root into every reachable leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.data.shape}")
    topo, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._bw is not None and node.grad is not None:
            node._bw(node.grad)


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bw)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    out_data = a.data - b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), bw)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), bw)


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    out_data = a.data / b.data

    def bw(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), bw)


def neg(a):
    def bw(g):
        _acc(a, -g)

    return _node(-a.data, (a,), bw)


def matmul(a, b):
    out_data = a.data @ b.data

    def bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _node(out_data, (a, b), bw)


def affine(x, w, b):
    """x @ w + b with the bias broadcast over rows; fused for speed."""
    out_data = x.data @ w.data + b.data

    def bw(g):
        _acc(x, g @ w.data.T)
        _acc(w, x.data.T @ g)
        _acc(b, g.sum(axis=0) if g.ndim > 1 else g)

    return _node(out_data, (x, w, b), bw)


# --------------------------------------------------------------- elementwise


def exp(a):
    e = np.exp(a.data)

    def bw(g):
        _acc(a, g * e)

    return _node(e, (a,), bw)


def log(a):
    def bw(g):
        _acc(a, g / a.data)

    return _node(np.log(a.data), (a,), bw)


def tanh(a):
    t = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - t * t))

    return _node(t, (a,), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        _acc(a, g * mask)

    return _node(a.data * mask, (a,), bw)


def sqrt(a):
    s = np.sqrt(a.data)

    def bw(g):
        _acc(a, g * (0.5 / s))

    return _node(s, (a,), bw)


def square(a):
    def bw(g):
        _acc(a, g * (2.0 * a.data))

    return _node(a.data * a.data, (a,), bw)


def pow_const(a, p):
    out_data = a.data**p

    def bw(g):
        _acc(a, g * (p * a.data ** (p - 1)))

    return _node(out_data, (a,), bw)


def softplus(a):
    """log(1 + e^x), computed stably; gradient is the logistic sigmoid."""
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        _acc(a, g / (1.0 + np.exp(-x)))

    return _node(out_data, (a,), bw)


def minimum(a, b):
    """Elementwise minimum; ties route the gradient to the first argument."""
    mask = a.data <= b.data

    def bw(g):
        _acc(a, g * mask)
        _acc(b, g * ~mask)

    return _node(np.where(mask, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(ge, a.data.shape).copy())

    return _node(out_data, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _acc(a, np.broadcast_to(g / n, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(ge / n, a.data.shape).copy())

    return _node(out_data, (a,), bw)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _acc(a, s * (g - dot))

    return _node(s, (a,), bw)


def logsumexp(a, axis=-1, keepdims=False):
    m = a.data.max(axis=axis, keepdims=True)
    out_k = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    out_data = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        _acc(a, ge * np.exp(a.data - out_k))

    return _node(out_data, (a,), bw)


# ----------------------------------------------------------------- shape ops


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(t, g[tuple(idx)])

    return _node(out_data, tensors, bw)


def reshape(a, shape):
    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bw)


def repeat_rows(a, n):
    """Repeat each row of a 2D tensor n times: (k, m) -> (k*n, m)."""
    k, m = a.data.shape
    out_data = np.repeat(a.data, n, axis=0)

    def bw(g):
        _acc(a, g.reshape(k, n, m).sum(axis=1))

    return _node(out_data, (a,), bw)


def slice_rows(a, start, stop):
    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _acc(a, full)

    return _node(a.data[start:stop], (a,), bw)


def slice_cols(a, start, stop):
    def bw(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _acc(a, full)

    return _node(a.data[..., start:stop], (a,), bw)

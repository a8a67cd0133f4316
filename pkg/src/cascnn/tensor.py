"""Dense float64 tensors with a small reverse-mode tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent. Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates into the ``grad`` buffer of every leaf that requires
gradients.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, UsageError

__all__ = [
    "Tensor",
    "Parameter",
    "make_node",
    "constant",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "scale_channels",
    "broadcast_rows",
    "reshape",
    "total",
    "mean",
    "conv2d_same",
    "conv1x1",
    "global_avg_pool",
    "dense",
    "xavier_normal_init",
]


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.values = np.array(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.values.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.shape}")
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


class Parameter(Tensor):
    """A named leaf tensor carrying optimizer state (two moments, step count)."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, values, name):
        super().__init__(values, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.values)
        self.v = np.zeros_like(self.values)
        self.step = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def make_node(values, parents, backward):
    """Wrap ``values`` as the output of an op over ``parents``.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def constant(values):
    return values if isinstance(values, Tensor) else Tensor(values)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        axis = "rank" if a.values.ndim != b.values.ndim else f"axis {_first_diff(a.shape, b.shape)}"
        raise DimensionError(op, axis, a.shape, b.shape)


def _first_diff(s1, s2):
    return next(i for i, (p, q) in enumerate(zip(s1, s2)) if p != q)


def _rank(op, name, t, rank):
    if t.values.ndim != rank:
        raise DimensionError(op, f"{name} rank", rank, t.values.ndim)


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = constant(a), constant(b)
    _same_shape("add", a, b)
    return make_node(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = constant(a), constant(b)
    _same_shape("sub", a, b)
    return make_node(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = constant(a), constant(b)
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return make_node(av * bv, (a, b), lambda g: (g * bv, g * av))


def relu(x):
    x = constant(x)
    on = x.values > 0
    return make_node(np.where(on, x.values, 0.0), (x,), lambda g: (np.where(on, g, 0.0),))


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = constant(x)
    s = _sigmoid(x.values)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),))


def scale_channels(x, s):
    """out[c] = s[c] * x[c] for x of shape C x H x W."""
    x, s = constant(x), constant(s)
    _rank("scale_channels", "input", x, 3)
    _rank("scale_channels", "scale", s, 1)
    if s.shape[0] != x.shape[0]:
        raise DimensionError("scale_channels", "channel axis", x.shape[0], s.shape[0])
    xv, sv = x.values, s.values
    out = xv * sv[:, None, None]
    return make_node(out, (x, s), lambda g: (g * sv[:, None, None], (g * xv).sum(axis=(1, 2))))


def broadcast_rows(m, v):
    """out[i, j] = m[i, j] + v[i]."""
    m, v = constant(m), constant(v)
    _rank("broadcast_rows", "matrix", m, 2)
    _rank("broadcast_rows", "vector", v, 1)
    if v.shape[0] != m.shape[0]:
        raise DimensionError("broadcast_rows", "row axis", m.shape[0], v.shape[0])
    return make_node(m.values + v.values[:, None], (m, v), lambda g: (g, g.sum(axis=1)))


def reshape(x, shape):
    x = constant(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError("reshape", "size", x.size, int(np.prod(shape)))
    old = x.shape
    return make_node(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def total(x):
    x = constant(x)
    return make_node(np.array(x.values.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(scalars):
    """Unweighted mean of a sequence of scalar tensors."""
    scalars = [constant(s) for s in scalars]
    if not scalars:
        raise UsageError("mean() of an empty sequence")
    k = len(scalars)
    acc = 0.0
    for s in scalars:
        acc = acc + s.values.reshape(())
    values = np.array(acc / k)

    def backward(g):
        share = g / k
        return tuple(np.full(s.shape, float(share)) for s in scalars)

    return make_node(values, scalars, backward)


# -- linear maps -------------------------------------------------------------

def conv2d_same(x, weight, bias, k=None):
    """Zero-padded stride-1 cross-correlation keeping the H x W extent.

    ``x`` is C_in x H x W, ``weight`` C_out x C_in x k x k with k odd,
    ``bias`` has C_out entries.
    """
    x, weight, bias = constant(x), constant(weight), constant(bias)
    _rank("conv2d_same", "input", x, 3)
    _rank("conv2d_same", "weight", weight, 4)
    _rank("conv2d_same", "bias", bias, 1)
    c_out, c_in, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError("conv2d_same", "kernel width", kh, kw)
    if k is not None and k != kh:
        raise DimensionError("conv2d_same", "kernel size", k, kh)
    if kh % 2 == 0:
        raise DimensionError("conv2d_same", "kernel size (must be odd)", "odd", kh)
    if x.shape[0] != c_in:
        raise DimensionError("conv2d_same", "input channel axis", c_in, x.shape[0])
    if bias.shape[0] != c_out:
        raise DimensionError("conv2d_same", "output channel axis", c_out, bias.shape[0])
    k = kh
    pad = k // 2
    _, h, w = x.shape
    padded = np.pad(x.values, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))  # C_in, H, W, k, k
    wv = weight.values
    out = np.tensordot(wv, windows, axes=([1, 2, 3], [0, 3, 4])) + bias.values[:, None, None]

    def backward(g):
        gw = np.tensordot(g, windows, axes=([1, 2], [1, 2])) if weight.requires_grad else None
        gb = g.sum(axis=(1, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            for p in range(k):
                for q in range(k):
                    gpad[:, p:p + h, q:q + w] += np.tensordot(wv[:, :, p, q], g, axes=([0], [0]))
            gx = gpad[:, pad:pad + h, pad:pad + w]
        return gx, gw, gb

    return make_node(out, (x, weight, bias), backward)


def conv1x1(x, weight, bias):
    """Per-position channel mixing: weight is C_out x C_in."""
    x, weight, bias = constant(x), constant(weight), constant(bias)
    _rank("conv1x1", "input", x, 3)
    _rank("conv1x1", "weight", weight, 2)
    _rank("conv1x1", "bias", bias, 1)
    c_out, c_in = weight.shape
    if x.shape[0] != c_in:
        raise DimensionError("conv1x1", "input channel axis", c_in, x.shape[0])
    if bias.shape[0] != c_out:
        raise DimensionError("conv1x1", "output channel axis", c_out, bias.shape[0])
    xv, wv = x.values, weight.values
    out = np.tensordot(wv, xv, axes=([1], [0])) + bias.values[:, None, None]

    def backward(g):
        return (
            np.tensordot(wv, g, axes=([0], [0])),
            np.tensordot(g, xv, axes=([1, 2], [1, 2])),
            g.sum(axis=(1, 2)),
        )

    return make_node(out, (x, weight, bias), backward)


def global_avg_pool(x):
    x = constant(x)
    _rank("global_avg_pool", "input", x, 3)
    c, h, w = x.shape
    if h * w == 0:
        raise DimensionError("global_avg_pool", "spatial extent", ">= 1", h * w)
    out = x.values.mean(axis=(1, 2))
    return make_node(out, (x,), lambda g: (np.broadcast_to(g[:, None, None] / (h * w), x.shape).copy(),))


def dense(x, weight, bias):
    """Affine map weight @ x + bias on a vector."""
    x, weight, bias = constant(x), constant(weight), constant(bias)
    _rank("dense", "input", x, 1)
    _rank("dense", "weight", weight, 2)
    _rank("dense", "bias", bias, 1)
    n_out, n_in = weight.shape
    if x.shape[0] != n_in:
        raise DimensionError("dense", "input axis", n_in, x.shape[0])
    if bias.shape[0] != n_out:
        raise DimensionError("dense", "output axis", n_out, bias.shape[0])
    xv, wv = x.values, weight.values
    return make_node(wv @ xv + bias.values, (x, weight, bias), lambda g: (wv.T @ g, np.outer(g, xv), g))


def xavier_normal_init(shape, fan_in, fan_out, rng):
    """Draw from N(0, 2 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fans must be positive")
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, std, size=tuple(shape)))

"""Minimal reverse-mode autodiff over numpy arrays.

Just enough ops for an encoder-decoder transformer: broadcasting arithmetic,
batched matmul, gathers, softmax/log-softmax, layer norm, relu, reductions.
Gradients accumulate into .grad during backward(); dtype follows the data,
so the same graph runs in float32 for training and float64 for checking.
"""

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def backward(self):
        """Reverse accumulation from this (scalar) node."""
        if self.data.ndim != 0:
            raise ValueError("backward() expects a scalar loss")
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = g
                else:
                    p.grad = p.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data, parents, vjp):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _vjp=vjp if req else None)


def add(a, b):
    if isinstance(b, (int, float)):
        a = _wrap(a)
        return _node(a.data + b, (a,), lambda g: (g,))
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(g, b.data.shape)))


def mul(a, b):
    # python scalars stay scalars: wrapping would promote float32 data
    if isinstance(b, (int, float)):
        a = _wrap(a)
        return _node(a.data * b, (a,), lambda g: (g * b,))
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                         _unbroadcast(g * a.data, b.data.shape)))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def relu(x):
    x = _wrap(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x, axis=-1):
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), vjp)


def log_softmax(x, axis=-1):
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        sum_axes = tuple(range(g.ndim - 1))
        dgamma = _unbroadcast((g * xhat).sum(axis=sum_axes), gamma.data.shape)
        dbeta = _unbroadcast(g.sum(axis=sum_axes), beta.data.shape)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), vjp)


def embedding(table, ids):
    """Row gather: table (V, d), ids int array (...) -> (..., d)."""
    table = _wrap(table)
    ids = np.asarray(ids)
    out = table.data[ids]

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (dt,)

    return _node(out, (table,), vjp)


def gather_last(x, idx):
    """Pick one entry along the last axis: x (..., V), idx (...) -> (...)."""
    x = _wrap(x)
    idx = np.asarray(idx)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx[..., None], g[..., None], axis=-1)
        return (dx,)

    return _node(out, (x,), vjp)


def tsum(x, axis=None, keepdims=False):
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for a in sorted(a % x.data.ndim for a in ax):
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _node(out, (x,), vjp)


def tmean(x, axis=None, keepdims=False):
    x = _wrap(x)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def transpose(x, axes):
    x = _wrap(x)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def reshape(x, shape):
    x = _wrap(x)
    old = x.data.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def dropout(x, rate, rng, train):
    """Inverted dropout; identity when not training or rate is 0."""
    if not train or rate <= 0.0:
        return x
    x = _wrap(x)
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    keep /= (1.0 - rate)
    return mul(x, Tensor(keep))


def finite_difference_grad(f, tensor, h=1e-4):
    """Central-difference gradient of scalar f() w.r.t. tensor.data (in place)."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = float(f())
        flat[i] = keep - h
        down = float(f())
        flat[i] = keep
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(tensor.data.shape)


def grad_gap(analytic, numeric):
    """max|a-n| scaled by the larger of the two gradient magnitudes."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    return float(np.abs(a - n).max(initial=0.0) / (scale + 1e-30))

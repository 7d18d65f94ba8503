"""Dense tensor arithmetic with a reverse-mode tape.

Every op takes and returns :class:`Tensor`.  When gradient recording is
enabled and at least one input requires a gradient, the op stores a closure
that maps the output gradient to input gradients; :func:`backward` walks the
recorded graph in reverse topological order and accumulates into
:class:`Parameter` gradients.

Storage is float32 by default.  Build the model in float64 for verification
runs (finite-difference checks); every op keeps the dtype of its inputs.
"""
from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

__all__ = [
    "Tensor", "Parameter", "DimensionError", "StateError", "NumericsError",
    "no_grad", "checked", "is_grad_enabled",
    "add", "sub", "mul", "scale", "matmul", "dot", "gelu", "softmax",
    "log_softmax", "layer_norm", "embedding_gather", "cross_entropy",
    "reshape", "transpose", "take", "assign", "sum_", "mean",
    "entropy", "argmax", "topk", "backward",
]


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericsError(FloatingPointError):
    pass


_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad", True)


def _is_checked():
    return getattr(_state, "checked", False)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def checked(enabled=True):
    """Raise :class:`NumericsError` whenever an op produces NaN or inf."""
    prev = _is_checked()
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Parameter(Tensor):
    """A trainable tensor with its own gradient accumulator."""

    __slots__ = ("name", "grad")

    def __init__(self, name, value):
        value = np.ascontiguousarray(value)
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn):
    if _is_checked() and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced (shape {data.shape})")
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn)
    return Tensor(data)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(out, (a, b), bw)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _make(out, (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(out, (a, b), bw)


def scale(a, c):
    a = _wrap(a)
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    x = _wrap(x)
    v = x.data
    dt = v.dtype.type
    v2 = v * v
    inner = dt(_GELU_C) * v * (dt(1.0) + dt(0.044715) * v2)
    t = np.tanh(inner)
    out = dt(0.5) * v * (dt(1.0) + t)

    def bw(g):
        dinner = dt(_GELU_C) * (dt(1.0) + dt(3 * 0.044715) * v2)
        d = dt(0.5) * (dt(1.0) + t) + dt(0.5) * v * (dt(1.0) - t * t) * dinner
        return (g * d,)
    return _make(out, (x,), bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes, batched over leading axes.

    ``a`` may carry leading batch axes while ``b`` is a plain matrix; in that
    case the weight gradient is formed from the flattened batch so that the
    reduction runs as a single matrix product.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one GEMM instead of a loop of small per-batch products
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
    else:
        out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _make(out, (a, b), bw)


def dot(a, b):
    """Inner product of two vectors (or along the last axis)."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"dot shape mismatch: {a.shape} . {b.shape}")
    return sum_(mul(a, b), axis=-1)


# -- shape ops ---------------------------------------------------------------

def reshape(x, shape):
    x = _wrap(x)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes):
    x = _wrap(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in items)


def take(x, idx):
    """``x[idx]`` with a scatter-add backward."""
    x = _wrap(x)
    out = x.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def bw(g):
        full = np.zeros_like(x.data)
        if _is_basic(idx):
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _make(out, (x,), bw)


def assign(x, idx, value):
    """Copy of ``x`` with ``x[idx]`` replaced by ``value``.

    The overwritten entries receive no gradient; ``value`` receives the
    gradient flowing into the overwritten slots.
    """
    x, value = _wrap(x), _wrap(value, like=x)
    out = x.data.copy()
    out[idx] = value.data

    def bw(g):
        gx = g.copy()
        gx[idx] = 0
        gv = _unbroadcast(np.asarray(g[idx]), value.shape)
        return gx, gv
    return _make(out, (x, value), bw)


def sum_(x, axis=None):
    x = _wrap(x)
    out = np.asarray(x.data.sum(axis=axis))
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g2 = np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)
    return _make(out, (x,), bw)


def mean(x, axis=None):
    x = _wrap(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis), 1.0 / n)


# -- normalisation / probabilities ---------------------------------------------

def softmax(x, axis=-1, mask=None):
    """Max-subtracted softmax.  ``mask`` (broadcastable bool) marks allowed slots."""
    x = _wrap(x)
    v = x.data
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)
    return _make(p, (x,), bw)


def log_softmax(x, axis=-1):
    x = _wrap(x)
    v = x.data
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return _make(out, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(f"layer_norm affine shape {gain.shape} does not match {x.shape}")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + v.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    n = v.shape[-1]

    def bw(g):
        gx = ggain = gbias = None
        gh = g * gain.data
        if x.requires_grad:
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias
    return _make(out, (x, gain, bias), bw)


def embedding_gather(table, ids):
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)
    return _make(out, (table,), bw)


def cross_entropy(logits, targets, weights=None):
    """Weighted mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` has shape ``[..., V]``; ``targets`` the leading shape.  Rows
    with zero weight (padding) contribute nothing.
    """
    logits = _wrap(logits)
    v = logits.data.reshape(-1, logits.shape[-1])
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    w = np.ones(t.shape, dtype=v.dtype) if weights is None else \
        np.asarray(weights, dtype=v.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one weighted row")
    shifted = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(t.size)
    nll = -logp[rows, t]
    out = np.asarray((nll * w).sum() / total, dtype=v.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        p *= (w / total)[:, None] * g
        return (p.reshape(logits.shape),)
    return _make(out, (logits,), bw)


# -- plain-array helpers -------------------------------------------------------

def entropy(p, tol=1e-6):
    """Shannon entropy in nats with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > tol:
        raise ValueError("entropy expects a probability distribution")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def argmax(x):
    return int(np.argmax(np.asarray(x.data if isinstance(x, Tensor) else x)))


def topk(x, k):
    """Indices of the ``k`` largest entries, ties broken by lower index."""
    v = np.asarray(x.data if isinstance(x, Tensor) else x)
    order = np.lexsort((np.arange(v.size), -v))
    return order[:k]


# -- reverse pass --------------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(param) into every reachable :class:`Parameter`."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise StateError("backward expects a scalar Tensor")
    if not loss.requires_grad:
        raise StateError("no recorded forward computation reaches this value")
    order = []
    seen = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

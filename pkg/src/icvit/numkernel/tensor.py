"""Dense tensors with define-by-run reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` records a node holding
its parents and a closure that pushes the output gradient back to them. The
graph is rebuilt on every forward pass; :func:`backward` walks it in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from ..errors import ContractError, ShapeError
from . import kernels

_dtype = np.dtype(np.float64 if os.environ.get("ICVIT_F64", "0") == "1" else np.float32)


def get_dtype():
    return _dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the precision used for new tensors."""
    global _dtype
    prev = _dtype
    _dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def _node(data, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward_fn)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), bw)


def exp(x):
    out = np.exp(x.data)

    def bw(g):
        _accum(x, g * out)

    return _node(out, (x,), bw)


def log(x):
    def bw(g):
        _accum(x, g / x.data)

    return _node(np.log(x.data), (x,), bw)


def square(x):
    def bw(g):
        _accum(x, 2.0 * g * x.data)

    return _node(x.data * x.data, (x,), bw)


# -- linear algebra -----------------------------------------------------------
def matmul(a, b):
    """Matrix product with numpy batching rules on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                _accum(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- reductions and shape ops -------------------------------------------------
def sum_(x, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def reshape(x, shape):
    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), bw)


def transpose(x, axes):
    inv = np.argsort(axes)

    def bw(g):
        _accum(x, g.transpose(inv))

    return _node(x.data.transpose(axes), (x,), bw)


def swapaxes(x, a1, a2):
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx):
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(x, full)

    return _node(x.data[idx], (x,), bw)


def take_rows(table, idx):
    """Gather rows of a 2-D table; gradients scatter-add back."""
    idx = np.asarray(idx)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _node(table.data[idx], (table,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def broadcast_to(x, shape):
    def bw(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _node(np.broadcast_to(x.data, shape).copy(), (x,), bw)


# -- neural-network primitives ------------------------------------------------
def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def softmax(x, axis=-1):
    """Softmax along ``axis`` with max subtraction."""
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    y = kernels.softmax_fwd(_rows(moved)).reshape(moved.shape)

    def bw(g):
        gm = np.moveaxis(g, axis, -1)
        gx = kernels.softmax_bwd(_rows(y), _rows(gm)).reshape(moved.shape)
        _accum(x, np.moveaxis(gx, -1, axis))

    return _node(np.moveaxis(y, -1, axis), (x,), bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _node(out, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-6):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs width {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    y, xhat, rstd = kernels.layernorm_fwd(_rows(x.data), gamma.data, beta.data, x.data.dtype.type(eps))

    def bw(g):
        gx, gg, gb = kernels.layernorm_bwd(_rows(g), xhat, rstd, gamma.data)
        _accum(x, gx.reshape(x.shape))
        _accum(gamma, gg)
        _accum(beta, gb)

    return _node(y.reshape(x.shape), (x, gamma, beta), bw)


def gelu(x):
    """GELU, tanh approximation."""
    flat = _rows(x.data) if x.ndim else x.data.reshape(1, 1)
    y = kernels.gelu_fwd(flat).reshape(x.shape)

    def bw(g):
        gf = _rows(g) if x.ndim else g.reshape(1, 1)
        _accum(x, kernels.gelu_bwd(flat, gf).reshape(x.shape))

    return _node(y, (x,), bw)


def l2_normalize(x, axis=-1, eps=1e-12):
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, (g - y * dot * (norm >= eps)) / denom)

    return _node(y, (x,), bw)


def cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` over the leading axis.

    ``logits`` is ``[K]`` for a single sample or ``[B, K]`` for a batch.
    """
    single = logits.ndim == 1
    z2 = logits.data.reshape(1, -1) if single else logits.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = z2.shape[1]
    if labels.shape[0] != z2.shape[0]:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {z2.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise IndexError(f"cross_entropy: label out of range [0, {k})")
    z = z2 - z2.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(z2.shape[0])
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        p *= g / z2.shape[0]
        _accum(logits, p.reshape(logits.shape))

    return _node(np.asarray(loss), (logits,), bw)


# -- backward -----------------------------------------------------------------
def backward(root):
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``root``."""
    if root.size != 1:
        raise ContractError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward: root is not on the tape")

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior buffers are not needed after propagation
            node.grad = None if node._parents else node.grad
    return order

"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array together with the bookkeeping needed
to backpropagate: parent references and a local gradient rule.  Graphs are
built eagerly by the op functions below and differentiated by
:func:`backward`.  float32 is the working precision; float64 is used by the
verification helpers (:func:`finite_diff_check`).
"""

import numpy as np

from .kernels import (DimensionError, conv2d_backward, conv2d_forward,
                      maxpool2d_backward, maxpool2d_forward)


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class Tensor:
    """Numpy-backed value node of the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _result(data, parents, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), bwd)


def scale(a, s):
    a = as_tensor(a)
    s = a.data.dtype.type(s)
    data = a.data * s

    def bwd(g):
        return (g * s,)

    return _result(data, (a,), bwd)


def relu(a):
    a = as_tensor(a)
    data = np.maximum(a.data, 0)

    def bwd(g):
        # subgradient 0 at the kink
        return (g * (a.data > 0),)

    return _result(data, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return _result(data, (a,), bwd)


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _result(data, (a,), bwd)


def clip(a, lo, hi):
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def bwd(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _result(data, (a,), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, (a, b), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _result(data, (a,), bwd)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} invalid for {ndim}-d tensor")
    return tuple(sorted(ax % ndim for ax in axes))


def tsum(a, axes=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axes, a.data.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _result(data, (a,), bwd)


def tmean(a, axes=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axes, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = tsum(a, axes, keepdims)
    return scale(out, 1.0 / count) if count != 1 else out


def tmax(a, axes=None, keepdims=False):
    """Max reduction; backward routes to the first maximal element per group."""
    a = as_tensor(a)
    axes = _normalize_axes(axes, a.data.ndim)
    moved = np.moveaxis(a.data, axes, range(a.data.ndim - len(axes), a.data.ndim))
    lead = moved.shape[:a.data.ndim - len(axes)]
    flat = moved.reshape(lead + (-1,))
    argmax = flat.argmax(axis=-1)
    data_flat = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    data = data_flat
    if keepdims:
        data = np.expand_dims(data, axes)

    def bwd(g):
        g_flat = g.reshape(lead) if keepdims else g.reshape(lead)
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, argmax[..., None], g_flat[..., None], axis=-1)
        dmoved = dflat.reshape(moved.shape)
        return (np.moveaxis(
            dmoved, range(a.data.ndim - len(axes), a.data.ndim), axes),)

    return _result(data, (a,), bwd)


def gather_rows(a, index):
    """Pick ``a[i, index[i]]`` for each row; used to select label logits."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(
            f"gather_rows: got matrix {a.shape} and index {index.shape}")
    if index.min(initial=0) < 0 or index.max(initial=0) >= a.shape[1]:
        raise ContractError("gather_rows: index out of range")
    rows = np.arange(a.shape[0])
    data = a.data[rows, index]

    def bwd(g):
        out = np.zeros_like(a.data)
        out[rows, index] = g
        return (out,)

    return _result(data, (a,), bwd)


def take_rows(a, idx):
    """Select rows ``a[idx]``; backward scatter-adds into the source rows."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(data, (a,), bwd)


def logsumexp(a, axis=1):
    """Row-wise log-sum-exp, stabilized; gradient is the softmax."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = (m + np.log(s)).squeeze(axis)
    softmax = e / s

    def bwd(g):
        return (np.expand_dims(g, axis) * softmax,)

    return _result(data, (a,), bwd)


def conv2d(a, w, stride=1, pad=0):
    a, w = as_tensor(a), as_tensor(w, like=a)
    data, cols = conv2d_forward(a.data, w.data, stride, pad)
    if not w.requires_grad:
        cols = None  # only the weight gradient needs the column matrix

    def bwd(g):
        gx, gw = conv2d_backward(a.data, w.data, g, stride, pad,
                                 a.requires_grad, w.requires_grad, cols)
        return gx, gw

    return _result(data, (a, w), bwd)


def maxpool2d(a, size=2):
    a = as_tensor(a)
    data, idx = maxpool2d_forward(a.data, size)

    def bwd(g):
        return (maxpool2d_backward(g, idx, a.shape, size),)

    return _result(data, (a,), bwd)


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
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
    return order


def backward(loss):
    """Reverse-accumulate gradients of a scalar ``loss`` over its graph.

    Gradients are stored on each requiring tensor's ``.grad`` and returned
    as ``{id(tensor): gradient array}``.  Repeated calls on the same graph
    recompute from scratch; nothing accumulates across calls.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got {loss.shape}")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    for node in order:
        if node.requires_grad:
            node.grad = grads.get(id(node))
    return grads


def finite_diff_check(f, x, h=1e-5, exclude=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and is evaluated in float64.
    ``exclude`` marks coordinates to drop from the max, e.g. those sitting
    within ``10*h`` of a relu kink.
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    loss = f(xt)
    if not np.isfinite(loss.data).all():
        raise ContractError("finite_diff_check: non-finite function value")
    backward(loss)
    analytic = xt.grad
    flat = base.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        pert = base.copy().reshape(-1)
        pert[i] = orig + h
        hi = float(f(Tensor(pert.reshape(base.shape), dtype=np.float64)).data)
        pert[i] = orig - h
        lo = float(f(Tensor(pert.reshape(base.shape), dtype=np.float64)).data)
        fd[i] = (hi - lo) / (2 * h)
    fd = fd.reshape(base.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-12)
    err = np.abs(analytic - fd) / denom
    if exclude is not None:
        err = err[~np.asarray(exclude, dtype=bool)]
    return float(err.max()) if err.size else 0.0


def relu_kink_mask(x, h=1e-5):
    """Coordinates too close to the relu kink for central differences."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.abs(data) < 10 * h

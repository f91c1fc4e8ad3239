"""Dense tensors with tape-based reverse-mode differentiation.

Every op works on whole numpy arrays. Binary elementwise ops only expand
size-1 axes of equal-rank operands (or a scalar); anything else is a
shape error, so each backward rule only has to sum over expanded axes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.float32


_state = _State()


def get_default_dtype():
    return _state.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    _state.dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default scalar type (float32 or float64)."""
    old = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextmanager
def no_grad():
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    """An n-d array plus the closure that maps its output gradient back to its inputs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_state.dtype)
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- graph ----------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it.

        Intermediate gradients are dropped as soon as their node is processed.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _topological(root: Tensor):
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _state.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1 and len(shape) != g.ndim:
        return np.asarray(g.sum()).reshape(shape)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_expand(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.size == 1 and a.ndim <= b.ndim or b.size == 1 and b.ndim <= a.ndim:
        return
    if a.ndim != b.ndim:
        raise ValueError(f"rank mismatch {a.shape} vs {b.shape}: reshape explicitly before combining")
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")


def _binary(a: ArrayLike, b: ArrayLike):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _check_expand(a.data, b.data)
    return a, b


# -- elementwise -----------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Huber-style loss per element: quadratic inside ``beta``, linear outside."""
    d = a.data
    ad = np.abs(d)
    small = ad < beta
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta).astype(a.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * np.where(small, d / beta, np.sign(d)),))


# -- reductions ------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def tmax(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max over one axis; the reverse rule routes to the first argmax."""
    axis = axis % a.ndim
    arg = np.argmax(a.data, axis=axis)
    arg_k = np.expand_dims(arg, axis)
    out = np.take_along_axis(a.data, arg_k, axis=axis)
    if not keepdims:
        out = out.squeeze(axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, arg_k, gk, axis=axis)
        return (full,)

    return _result(out, (a,), backward)


def pool(a: Tensor, axis: int, kind: str = "mean", keepdims: bool = False) -> Tensor:
    if kind == "mean":
        return mean(a, axis, keepdims)
    if kind == "max":
        return tmax(a, axis, keepdims)
    raise ValueError(f"unknown pool kind {kind!r}")


# -- normalizers -----------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=axis, keepdims=True)
    out = shifted

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


# -- linear algebra & shape ------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            if ga.shape != ad.shape:
                lead = ga.ndim - ad.ndim
                if lead:
                    ga = ga.sum(axis=tuple(range(lead)))
                ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
            if gb.shape != bd.shape:
                lead = gb.ndim - bd.ndim
                if lead:
                    gb = gb.sum(axis=tuple(range(lead)))
                gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def expand(a: Tensor, shape) -> Tensor:
    """Repeat size-1 axes up to ``shape`` (ranks must already agree)."""
    if a.ndim != len(shape):
        raise ValueError("expand keeps rank; reshape first")
    old = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Iterable[ArrayLike], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    if isinstance(index, Tensor):
        index = index.data

    basic = _is_basic(index)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    return _result(out, (a,), backward)


def gather_points(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along the point axis.

    ``x`` is (B, N, C) and ``idx`` is (B, ...) integer indices into N; the
    result has shape (B, ..., C).
    """
    B, N, C = x.shape
    idx = np.asarray(idx)
    if idx.shape[0] != B:
        raise ValueError("batch extents differ")
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise IndexError("gather index out of range")
    flat = (idx.reshape(B, -1) + (np.arange(B) * N)[:, None]).reshape(-1)
    out = x.data.reshape(B * N, C)[flat].reshape(*idx.shape, C)

    def backward(g):
        full = np.zeros((B * N, C), dtype=g.dtype)
        np.add.at(full, flat, g.reshape(-1, C))
        return (full.reshape(B, N, C),)

    return _result(out, (x,), backward)


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(np.where(mask, g, 0), a.shape) if a.requires_grad else None,
            _unbroadcast(np.where(mask, 0, g), b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Normalize over every axis except the last (channel) axis.

    In training mode the batch statistics are used and the running buffers
    are updated in place as ``r = momentum * r + (1 - momentum) * batch``.
    """
    axes = tuple(range(x.ndim - 1))
    bshape = (1,) * (x.ndim - 1) + (x.shape[-1],)
    g_ = gamma.data.reshape(bshape)
    if not training:
        # running statistics fold into one per-channel affine map, so the only
        # point-sized buffer is the output
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(x.dtype, copy=False)
        mean = running_mean.reshape(bshape).astype(x.dtype, copy=False)
        scale = inv * g_
        out = x.data * scale
        out += beta.data.reshape(bshape) - mean * scale

        def backward_eval(g):
            xhat = (x.data - mean) * inv
            ggamma = (g * xhat).sum(axis=axes).reshape(gamma.shape)
            gbeta = g.sum(axis=axes).reshape(beta.shape)
            return (g * scale if x.requires_grad else None), ggamma, gbeta

        return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward_eval)

    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    count = x.data.size // x.shape[-1]
    running_mean *= momentum
    running_mean += (1 - momentum) * mu.reshape(-1)
    unbiased = var.reshape(-1) * (count / max(count - 1, 1))
    running_var *= momentum
    running_var += (1 - momentum) * unbiased
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes).reshape(gamma.shape)
        gbeta = g.sum(axis=axes).reshape(beta.shape)
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)

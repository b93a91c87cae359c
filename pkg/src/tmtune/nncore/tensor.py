"""Reverse-mode autodiff on numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
propagating the output gradient back to them. ``Tensor.backward`` walks the
graph in reverse topological order. Broadcasting is only supported the way
bias addition needs it (trailing-aligned, summed back on the way down).
"""
from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "no_grad",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "tensor",
    "concat",
    "stack",
    "minimum",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "clip",
]

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeMismatch(ValueError):
    pass


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (float64 for gradient checks)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        dt = dtype or _DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dt)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # graph plumbing ---------------------------------------------------------
    @classmethod
    def _op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    def _accum(self, g):
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
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
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._backward is None:
                    p._accum(pg)
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + _unbroadcast(pg, p.data.shape)
                else:
                    grads[id(p)] = _unbroadcast(pg, p.data.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype.type)

    def zero_grad(self) -> None:
        self.grad = None

    # conveniences -----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        other = _wrap(other, self)
        return Tensor._op(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = _wrap(other, self)
        return Tensor._op(self.data - other.data, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return _wrap(other, self) - self

    def __mul__(self, other):
        other = _wrap(other, self)
        a, b = self.data, other.data
        return Tensor._op(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return self * (1.0 / other)

    def __pow__(self, p):
        if p != 2:
            raise ValueError("only squaring is supported")
        a = self.data
        return Tensor._op(a * a, (self,), lambda g: (2.0 * a * g,))

    def __matmul__(self, other):
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        return Tensor._op(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.data.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)
        return Tensor._op(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor._op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return Tensor._op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def __getitem__(self, idx):
        shape, dt = self.data.shape, self.data.dtype

        def back(g):
            out = np.zeros(shape, dtype=dt)
            np.add.at(out, idx, g)
            return (out,)
        return Tensor._op(np.ascontiguousarray(self.data[idx]), (self,), back)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dt = like.data.dtype.type if like is not None else _DTYPE
    return Tensor(x, dtype=dt)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def concat(tensors, axis: int = -1) -> Tensor:
    arrs = [t.data for t in tensors]
    sizes = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))
    return Tensor._op(np.concatenate(arrs, axis=axis), tuple(tensors), back)


def stack(tensors, axis: int = 0) -> Tensor:
    def back(g):
        return tuple(np.moveaxis(g, axis, 0))
    return Tensor._op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    pick = a.data <= b.data
    return Tensor._op(np.where(pick, a.data, b.data), (a, b),
                      lambda g: (np.where(pick, g, 0.0), np.where(pick, 0.0, g)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._op(np.where(pos, x.data, 0.0).astype(x.dtype), (x,),
                      lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._op(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor._op(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    a = x.data
    return Tensor._op(np.log(a), (x,), lambda g: (g / a,))


def softplus(x: Tensor) -> Tensor:
    a = x.data
    y = np.logaddexp(0.0, a).astype(a.dtype)
    return Tensor._op(y, (x,), lambda g: (g * _sigmoid(a),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient inside the bounds (zero outside)."""
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))

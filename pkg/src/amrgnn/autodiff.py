"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op returns a new ``Tensor`` holding references to its inputs and a
closure that pushes the output gradient back to them.  ``backward`` walks
the resulting tape in reverse topological order.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        # _backward maps the output gradient to one gradient (or None) per parent
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor(self.data + other.data, _parents=(self, other),
                      _backward=lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self, other

        def back(g):
            return (_unbroadcast(g * y.data, x.shape) if x.requires_grad else None,
                    _unbroadcast(g * x.data, y.shape) if y.requires_grad else None)
        return Tensor(self.data * other.data, _parents=(self, other), _backward=back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return self * (1.0 / other)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeMismatch(f"cannot multiply {self.shape} by {other.shape}")
        x, y = self, other

        def back(g):
            return (g @ y.data.T if x.requires_grad else None,
                    x.data.T @ g if y.requires_grad else None)
        return Tensor(self.data @ other.data, _parents=(self, other), _backward=back)

    def square(self):
        x = self.data
        return Tensor(x * x, _parents=(self,), _backward=lambda g: (2.0 * x * g,))

    def relu(self):
        mask = self.data > 0
        return Tensor(self.data * mask, _parents=(self,), _backward=lambda g: (g * mask,))

    def clip(self, lo: float, hi: float):
        mask = (self.data >= lo) & (self.data <= hi)
        return Tensor(np.clip(self.data, lo, hi), _parents=(self,), _backward=lambda g: (g * mask,))

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)
        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _backward=back)

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.data.reshape(*shape), _parents=(self,), _backward=lambda g: (g.reshape(old),))

    def __getitem__(self, index):
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)
        return Tensor(self.data[index], _parents=(self,), _backward=back)

    def backward(self, grad: np.ndarray | None = None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[index]`` along axis 0, with scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def back(g):
        full = np.zeros((n,) + g.shape[1:])
        np.add.at(full, index, g)
        return (full,)
    return Tensor(x.data[index], _parents=(x,), _backward=back)


def segment_sum(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``x`` that share a segment id."""
    segments = np.asarray(segments, dtype=np.int64)
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, segments, x.data)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g[segments],))


def segment_softmax(scores: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax over rows grouped by segment id, independently per column.

    Max-subtraction keeps every exponent non-positive.
    """
    segments = np.asarray(segments, dtype=np.int64)
    s = scores.data
    smax = np.full((n_segments,) + s.shape[1:], -np.inf)
    np.maximum.at(smax, segments, s)
    e = np.exp(s - smax[segments])
    denom = np.zeros_like(smax)
    np.add.at(denom, segments, e)
    p = e / denom[segments]

    def back(g):
        dot = np.zeros_like(smax)
        np.add.at(dot, segments, g * p)
        return (p * (g - dot[segments]),)
    return Tensor(p, _parents=(scores,), _backward=back)


def sparse_matmul(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Fixed sparse matrix times a differentiable dense tensor."""
    if matrix.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"cannot apply {matrix.shape} map to {x.shape}")
    m = sp.csr_matrix(matrix)
    mt = sp.csr_matrix(m.T)
    return Tensor(m @ x.data, _parents=(x,), _backward=lambda g: (mt @ g,))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return Tensor(np.concatenate(datas, axis=axis), _parents=tuple(tensors),
                  _backward=lambda g: tuple(np.split(g, sizes, axis=axis)))


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape.

    Only leaves (tensors created with ``requires_grad=True``) store gradients,
    and they add onto what is already there; call ``zero_grad`` between
    independent steps.
    """
    if grad is None:
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order = _topological(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def numerical_grad(fn, param: Tensor, eps: float = 1e-4, index=None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``param``.

    ``index`` optionally restricts the probe to a list of flat indices; the
    remaining entries are returned as NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    probe = range(flat.size) if index is None else index
    for i in probe:
        old = flat[i]
        flat[i] = old + eps
        fp = float(fn().data)
        flat[i] = old - eps
        fm = float(fn().data)
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(param.shape)

"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and records its parents plus a backward
closure; calling backward() on a scalar output walks the graph in reverse
creation order and accumulates exact gradients. Every op output is checked
for NaN/Inf so a blown-up activation fails loudly at its source.

Gradient buffers may be borrowed: a backward closure is allowed to hand a
parent the very array it received, and accumulation copies lazily on the
second contribution. Callers must therefore treat ``.grad`` as read-only
(clone before mutating).
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import NonFiniteActivation, ShapeError

_SEQ = itertools.count()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "_seq", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name
        self._seq = next(_SEQ)
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _node(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        # a sum is one cheap pass; NaN/Inf anywhere poisons it
        if not math.isfinite(float(data.sum())) and not np.all(np.isfinite(data)):
            names = ", ".join(p.name or "?" for p in parents)
            raise NonFiniteActivation(f"non-finite values produced from parents [{names}]")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out._seq = next(_SEQ)
        out._grad_owned = False
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, grad) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = grad if isinstance(grad, np.ndarray) else np.asarray(grad, dtype=np.float64)
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += grad
        else:
            self.grad = self.grad + grad
            self._grad_owned = True

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every requires_grad leaf."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        reached: list[Tensor] = []
        visited: set[int] = set()
        stack: list[Tensor] = [self]
        visited.add(id(self))
        while stack:
            node = stack.pop()
            reached.append(node)
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    visited.add(id(p))
                    stack.append(p)
        reached.sort(key=lambda t: t._seq, reverse=True)
        self.grad = np.ones_like(self.data)
        self._grad_owned = True
        for node in reached:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            def bw(g):
                self._accumulate(_unbroadcast(g, self.data.shape))
                other._accumulate(_unbroadcast(g, other.data.shape))

            return Tensor._node(self.data + other.data, (self, other), bw)

        const = np.asarray(other, dtype=np.float64)

        def bwc(g):
            self._accumulate(_unbroadcast(g, self.data.shape))

        return Tensor._node(self.data + const, (self,), bwc)

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            self._accumulate(-g)

        return Tensor._node(-self.data, (self,), bw)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (-other)
        return self + (-np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return (-self) + np.asarray(other, dtype=np.float64)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            def bw(g):
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

            return Tensor._node(self.data * other.data, (self, other), bw)

        const = np.asarray(other, dtype=np.float64)

        def bwc(g):
            self._accumulate(_unbroadcast(g * const, self.data.shape))

        return Tensor._node(self.data * const, (self,), bwc)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out_data = self.data / other.data

        def bw(g):
            self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            other._accumulate(_unbroadcast(-g * self.data / other.data**2, other.data.shape))

        return Tensor._node(out_data, (self, other), bw)

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __matmul__(self, other):
        other = Tensor._lift(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2 or (a.ndim != b.ndim and 2 not in (a.ndim, b.ndim)):
            raise ShapeError(f"unsupported matmul ranks {a.ndim} x {b.ndim}")
        if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError("batched matmul requires identical leading dims")
        out_data = a @ b

        def bw(g):
            self._accumulate(_unbroadcast(g @ b.swapaxes(-1, -2), a.shape))
            other._accumulate(_unbroadcast(a.swapaxes(-1, -2) @ g, b.shape))

        return Tensor._node(out_data, (self, other), bw)

    def pow(self, exponent: float):
        out_data = self.data**exponent

        def bw(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return Tensor._node(out_data, (self,), bw)

    # -- elementwise nonlinearities -----------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            self._accumulate(g * out_data)

        return Tensor._node(out_data, (self,), bw)

    def log(self):
        out_data = np.log(self.data)

        def bw(g):
            self._accumulate(g / self.data)

        return Tensor._node(out_data, (self,), bw)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bw(g):
            self._accumulate(g * 0.5 / out_data)

        return Tensor._node(out_data, (self,), bw)

    def relu(self):
        mask = self.data > 0

        def bw(g):
            self._accumulate(g * mask)

        return Tensor._node(np.where(mask, self.data, 0.0), (self,), bw)

    def sigmoid(self):
        x = self.data
        e = np.exp(-np.abs(x))
        out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

        def bw(g):
            self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._node(out_data, (self,), bw)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bw(g):
            self._accumulate(g * (1.0 - out_data**2))

        return Tensor._node(out_data, (self,), bw)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        old_shape = self.data.shape

        def bw(g):
            self._accumulate(g.reshape(old_shape))

        return Tensor._node(self.data.reshape(*shape), (self,), bw)

    def transpose(self):
        if self.data.ndim != 2:
            raise ShapeError("transpose supports 2D tensors only")

        def bw(g):
            self._accumulate(g.T)

        return Tensor._node(self.data.T, (self,), bw)

    @property
    def T(self):
        return self.transpose()

    def permute(self, *axes):
        inverse = tuple(np.argsort(axes))

        def bw(g):
            self._accumulate(g.transpose(inverse))

        return Tensor._node(self.data.transpose(axes), (self,), bw)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def bw(g):
            if not self.requires_grad:
                return
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
                self._grad_owned = True
            elif not self._grad_owned:
                self.grad = self.grad.copy()
                self._grad_owned = True
            np.add.at(self.grad, idx, g)

        return Tensor._node(np.array(out_data), (self,), bw)

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor._node(np.asarray(out_data), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return Tensor._node(out_data, tuple(tensors), bw)


def gather_rows(t: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows by integer index; duplicates accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    return t[idx]


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` as a single fused node."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        x._accumulate(s * (g - inner))

    return Tensor._node(s, (x,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b fused into one node; x is 2D, w (d_in, d_out), b (d_out,)."""
    out_data = x.data @ w.data + b.data

    def bw(g):
        x._accumulate(g @ w.data.T)
        w._accumulate(x.data.T @ g)
        b._accumulate(g.sum(axis=0))

    return Tensor._node(out_data, (x, w, b), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization fused into one node (normalizes axis -1)."""
    inv_n = 1.0 / x.data.shape[-1]
    mu = x.data.sum(axis=-1, keepdims=True) * inv_n
    xc = x.data - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        m1 = dxhat.sum(axis=-1, keepdims=True) * inv_n
        m2 = (dxhat * xhat).sum(axis=-1, keepdims=True) * inv_n
        x._accumulate(inv * (dxhat - m1 - xhat * m2))
        red = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=red))
        bias._accumulate(g.sum(axis=red))

    return Tensor._node(out_data, (x, gain, bias), bw)


def scalar_with_grad(value: float, wrt: list[tuple[Tensor, np.ndarray]], name: str | None = None) -> Tensor:
    """Wrap an externally computed scalar whose gradients are already known.

    ``wrt`` pairs each upstream tensor with d(value)/d(tensor); used to
    splice hand-derived loss gradients into the graph.
    """
    parents = tuple(t for t, _ in wrt)
    grads = [np.asarray(g, dtype=np.float64) for _, g in wrt]

    def bw(g):
        s = float(g)
        for t, gr in zip(parents, grads):
            t._accumulate(s * gr)

    out = Tensor._node(np.asarray(value, dtype=np.float64), parents, bw)
    out.name = name
    return out

"""Dense float64 tensors with reverse-mode differentiation.

Only the operations needed by the pose networks are provided. A graph node is
recorded whenever at least one input requires a gradient; leaves accumulate
``grad`` additively across :func:`backward` calls until :meth:`Tensor.zero_grad`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class EmptyInputError(ValueError):
    """A reduction was asked for over zero rows."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice)) for k in keys)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._prev = _prev
        self._backward = _backward

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction ------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, tuple(parents), backward)
        return Tensor(data)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(x * y, (self, other),
                            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(x / y, (self, other),
                            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)))

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        x = self.data
        return Tensor._make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"cannot multiply {self.shape} by {other.shape}")
        x, y = self.data, other.data
        return Tensor._make(x @ y, (self, other), lambda g: (g @ y.T, x.T @ g))

    # -- shape ops ---------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,))

    def __getitem__(self, key) -> "Tensor":
        shape = self.shape
        basic = _is_basic_index(key)

        def back(g):
            out = np.zeros(shape)
            if basic:
                out[key] = g
            else:
                np.add.at(out, key, g)
            return (out,)

        return Tensor._make(self.data[key], (self,), back)

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / n)

    def max(self, axis: int) -> "Tensor":
        """Maximum along ``axis``; the gradient goes to the first maximal entry."""
        if self.shape[axis] == 0:
            raise EmptyInputError(f"max over empty axis {axis} of shape {self.shape}")
        x = self.data
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)

        def back(g):
            out = np.zeros_like(x)
            np.put_along_axis(out, idx, np.expand_dims(g, axis), axis)
            return (out,)

        return Tensor._make(np.take_along_axis(x, idx, axis).squeeze(axis), (self,), back)

    # -- elementwise -------------------------------------------------------
    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)
        return Tensor._make(y, (self,), lambda g: (g * 0.5 / y,))

    def sin(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.sin(x), (self,), lambda g: (g * np.cos(x),))

    def cos(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.cos(x), (self,), lambda g: (-g * np.sin(x),))

    def clip(self, lo: float, hi: float) -> "Tensor":
        x = self.data
        mask = (x >= lo) & (x <= hi)
        return Tensor._make(np.clip(x, lo, hi), (self,), lambda g: (g * mask,))

    def arccos(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.arccos(x), (self,), lambda g: (-g / np.sqrt(1.0 - x * x),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return concat([as_tensor(t).reshape(_expand_shape(t.shape, axis)) for t in tensors], axis=axis)


def _expand_shape(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    s = list(shape)
    s.insert(axis if axis >= 0 else len(s) + 1 + axis, 1)
    return tuple(s)


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` for a ``B x I`` batch."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
    xd, Wd = x.data, W.data
    return Tensor._make(xd @ Wd + b.data, (x, W, b),
                        lambda g: (g @ Wd.T, xd.T @ g, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def max_pool_rows(x: Tensor) -> Tensor:
    """Column-wise maximum of an ``N x F`` tensor (lowest row wins ties)."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"max_pool_rows expects a matrix, got {x.shape}")
    if x.shape[0] == 0:
        raise EmptyInputError("max_pool_rows needs at least one row")
    return x.max(axis=0)


def cross(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cross product of ``B x 3`` tensors."""
    a1, a2, a3 = a[:, 0:1], a[:, 1:2], a[:, 2:3]
    b1, b2, b3 = b[:, 0:1], b[:, 1:2], b[:, 2:3]
    return concat([a2 * b3 - a3 * b2, a3 * b1 - a1 * b3, a1 * b2 - a2 * b1], axis=1)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._prev, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def shared_mlp_maxpool(points: np.ndarray, weights: Sequence[Tensor], biases: Sequence[Tensor],
                       chunk: int = 4) -> Tensor:
    """``max_pool_rows(relu-MLP(points))`` per cloud for a ``(B, N, D)`` batch.

    Same value and gradient as composing :func:`linear`, :func:`relu` and a
    row-wise max, but the per-point activations are not kept: the backward
    pass recomputes the MLP only on the rows that won the max for some
    feature, which are the only rows that receive gradient.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 3:
        raise ShapeError(f"expected a (B, N, D) batch, got {pts.shape}")
    B, N, D = pts.shape
    if N == 0:
        raise EmptyInputError("cannot pool over zero points")
    Ws = [w.data for w in weights]
    bs = [b.data for b in biases]
    if Ws[0].shape[0] != D:
        raise ShapeError(f"points have {D} coords but first weight is {Ws[0].shape}")
    F = Ws[-1].shape[1]
    out = np.empty((B, F))
    arg = np.empty((B, F), dtype=np.int64)
    for i in range(0, B, chunk):
        h = pts[i:i + chunk].reshape(-1, D)
        for W, b in zip(Ws[:-1], bs[:-1]):
            h = np.maximum(h @ W + b, 0.0)
        z = (h @ Ws[-1] + bs[-1]).reshape(-1, N, F)
        a = z.argmax(axis=1)
        arg[i:i + chunk] = a
        out[i:i + chunk] = np.take_along_axis(z, a[:, None, :], 1)[:, 0, :]
    out = np.maximum(out, 0.0)

    def back(g):
        keys = (np.arange(B)[:, None] * N + arg).ravel()
        rows, inv = np.unique(keys, return_inverse=True)
        h = pts.reshape(-1, D)[rows]
        acts, zs = [h], []
        for W, b in zip(Ws, bs):
            z = acts[-1] @ W + b
            zs.append(z)
            acts.append(np.maximum(z, 0.0))
        dz = np.zeros((len(rows), F))
        dz[inv, np.tile(np.arange(F), B)] = g.ravel()
        grads_W, grads_b = [None] * len(Ws), [None] * len(Ws)
        for k in range(len(Ws) - 1, -1, -1):
            dz = dz * (zs[k] > 0)
            grads_W[k] = acts[k].T @ dz
            grads_b[k] = dz.sum(axis=0)
            if k:
                dz = dz @ Ws[k].T
        return tuple(grads_W) + tuple(grads_b)

    return Tensor._make(out, tuple(weights) + tuple(biases), back)

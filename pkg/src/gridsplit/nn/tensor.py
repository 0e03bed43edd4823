"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the two graph networks need are provided. Every op
records its parents and a closure that pushes the output gradient back to
them; :meth:`Tensor.backward` replays the tape in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import sparse


class NonScalarLoss(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable[[np.ndarray], None] | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, check_finite: bool = True) -> None:
        if self.data.size != 1:
            raise NonScalarLoss(f"backward() needs a scalar, got shape {self.shape}")
        if check_finite and not np.isfinite(self.data).all():
            raise NonFiniteValue(f"loss is {self.data}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor(a.data + b.data, _parents=(a, b), _backward=bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor(-a.data, _parents=(a,), _backward=lambda g: a._accum(-g))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor(a.data * b.data, _parents=(a, b), _backward=bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / b.data**2, b.shape))

        return Tensor(a.data / b.data, _parents=(a, b), _backward=bw)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        a = self
        return Tensor(a.data**p, _parents=(a,), _backward=lambda g: a._accum(g * p * a.data ** (p - 1)))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")

        def bw(g):  # frozen operands (e.g. a pretrained encoder) skip their product
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)

        return Tensor(a.data @ b.data, _parents=(a, b), _backward=bw)

    # -- elementwise -----------------------------------------------------
    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        return Tensor(a.data * mask, _parents=(a,), _backward=lambda g: a._accum(g * mask))

    def sigmoid(self) -> "Tensor":
        a = self
        out = np.empty_like(a.data)
        pos = a.data >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        e = np.exp(a.data[~pos])
        out[~pos] = e / (1.0 + e)
        return Tensor(out, _parents=(a,), _backward=lambda g: a._accum(g * out * (1.0 - out)))

    def tanh(self) -> "Tensor":
        a = self
        out = np.tanh(a.data)
        return Tensor(out, _parents=(a,), _backward=lambda g: a._accum(g * (1.0 - out**2)))

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return Tensor(out, _parents=(a,), _backward=lambda g: a._accum(g * out))

    def log(self) -> "Tensor":
        a = self
        return Tensor(np.log(a.data), _parents=(a,), _backward=lambda g: a._accum(g / a.data))

    def abs(self) -> "Tensor":
        a = self
        return Tensor(np.abs(a.data), _parents=(a,), _backward=lambda g: a._accum(g * np.sign(a.data)))

    def square(self) -> "Tensor":
        a = self
        return Tensor(a.data**2, _parents=(a,), _backward=lambda g: a._accum(2.0 * g * a.data))

    def clip(self, lo: float, hi: float) -> "Tensor":
        a = self
        mask = (a.data >= lo) & (a.data <= hi)
        return Tensor(np.clip(a.data, lo, hi), _parents=(a,), _backward=lambda g: a._accum(g * mask))

    # -- reductions and shape --------------------------------------------
    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        return Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward=bw)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(n, 1))

    def reshape(self, *shape) -> "Tensor":
        a = self
        return Tensor(a.data.reshape(*shape), _parents=(a,), _backward=lambda g: a._accum(g.reshape(a.shape)))

    @property
    def T(self) -> "Tensor":
        a = self
        return Tensor(a.data.T, _parents=(a,), _backward=lambda g: a._accum(g.T))

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

        return Tensor(a.data[idx], _parents=(a,), _backward=bw)


def _scatter_add(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Rows of ``values`` summed into ``n`` slots by ``index``."""
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n)[:n] if index.size else np.zeros(n)
    flat = values.reshape(values.shape[0], -1)
    m = sparse.csr_matrix((np.ones(index.size), (index, np.arange(index.size))), shape=(n, index.size))
    return np.asarray(m @ flat).reshape((n,) + values.shape[1:])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``x[index]``; gradients are scatter-added back."""
    index = np.asarray(index, dtype=int)

    def bw(g):
        x._accum(_scatter_add(g, index, x.shape[0]))

    return Tensor(x.data[index], _parents=(x,), _backward=bw)


def segment_sum(x: Tensor, index: np.ndarray, n: int) -> Tensor:
    """out[k] = sum of rows of ``x`` whose ``index`` is k."""
    index = np.asarray(index, dtype=int)
    out = _scatter_add(x.data, index, n)
    return Tensor(out, _parents=(x,), _backward=lambda g: x._accum(g[index]))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            p._accum(gp)

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts), _backward=bw)


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        a._accum(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        b._accum(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return Tensor(np.where(mask, a.data, b.data), _parents=(a, b), _backward=bw)


def padded_prod(x: Tensor, index: np.ndarray) -> Tensor:
    """out[k] = product of ``x[index[k, j]]`` over entries with index >= 0.

    Negative entries are padding (factor 1). The gradient uses prefix and
    suffix products, so factors equal to zero are handled exactly.
    """
    index = np.asarray(index, dtype=int)
    if index.ndim != 2:
        raise ShapeMismatch("padded_prod needs a 2-D index matrix")
    K, m = index.shape
    valid = index >= 0
    vals = np.where(valid, x.data[np.where(valid, index, 0)], 1.0) if x.data.size else np.ones((K, m))
    ones = np.ones((K, 1))
    pre = np.cumprod(np.hstack([ones, vals[:, :-1]]), axis=1) if m else vals
    suf = np.cumprod(np.hstack([ones, vals[:, ::-1][:, :-1]]), axis=1)[:, ::-1] if m else vals

    def bw(g):
        gv = g[:, None] * pre * suf
        full = np.zeros_like(x.data)
        np.add.at(full, index[valid], gv[valid])
        x._accum(full)

    return Tensor(vals.prod(axis=1), _parents=(x,), _backward=bw)


def maximum0(x: Tensor) -> Tensor:
    return x.relu()


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``, identity gradient into ``soft``."""
    return Tensor(np.asarray(hard, dtype=np.float64), _parents=(soft,), _backward=lambda g: soft._accum(g))


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``t.data``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = float(f().data.item())
        flat[k] = old - h
        fm = float(f().data.item())
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g

"""Parameterised layers: linear, two-layer MLP, GRU cell."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeMismatch, Tensor, as_tensor


class Module:
    """Anything holding parameters; children are found through attributes."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for k, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{k}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.W = param(glorot(rng, n_in, n_out))
        self.b = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"Linear expects {self.n_in} features, got {x.shape[-1]}")
        y = x @ self.W
        return y + self.b if self.b is not None else y


class MLP(Module):
    """affine -> ReLU -> affine."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.l1 = Linear(n_in, n_hidden, rng)
        self.l2 = Linear(n_hidden, n_out, rng)

    @property
    def n_in(self) -> int:
        return self.l1.n_in

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(self.l1(x).relu())


def mlp_forward(p: MLP, x) -> Tensor:
    return p(as_tensor(x))


class GRUCell(Module):
    """Gated recurrent unit.

    r = sig(x Wr + h Ur + br), u = sig(x Wu + h Uu + bu),
    n = tanh(x Wn + bn + r * (h Un + cn)), h' = (1 - u) * n + u * h.
    """

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_in, self.n_hidden = n_in, n_hidden
        self.Wr = param(glorot(rng, n_in, n_hidden))
        self.Ur = param(glorot(rng, n_hidden, n_hidden))
        self.br = param(np.zeros(n_hidden))
        self.Wu = param(glorot(rng, n_in, n_hidden))
        self.Uu = param(glorot(rng, n_hidden, n_hidden))
        self.bu = param(np.zeros(n_hidden))
        self.Wn = param(glorot(rng, n_in, n_hidden))
        self.Un = param(glorot(rng, n_hidden, n_hidden))
        self.bn = param(np.zeros(n_hidden))
        self.cn = param(np.zeros(n_hidden))

    def __call__(self, m: Tensor, h: Tensor) -> Tensor:
        m, h = as_tensor(m), as_tensor(h)
        if m.shape[-1] != self.n_in or h.shape[-1] != self.n_hidden or m.shape[0] != h.shape[0]:
            raise ShapeMismatch(f"GRU got message {m.shape} and state {h.shape}")
        r = (m @ self.Wr + h @ self.Ur + self.br).sigmoid()
        u = (m @ self.Wu + h @ self.Uu + self.bu).sigmoid()
        n = (m @ self.Wn + self.bn + r * (h @ self.Un + self.cn)).tanh()
        return (1.0 - u) * n + u * h


def gru_cell(p: GRUCell, m, h) -> Tensor:
    return p(as_tensor(m), as_tensor(h))

"""Heterogeneous busbar graph network predicting breaker closure probabilities.

Busbars are nodes; breakers and lines are two edge types with their own
message functions. Per node, the two typed message sums are mixed by an
attention softmax over the types present at that node, then a GRU shared by
all layers updates the state. A two-layer head scores each breaker from its
endpoint states and its edge features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .grid_model import Instance, NodeBreakerGraph
from .nn import MLP, GRUCell, Linear, Module, Tensor, as_tensor, concat, gather, segment_sum, where
from .nn.checkpoint import checkpoint_dict, load_params
from .nn.layers import param
from .topo import HeteroGraph, build_hetero_graph

EPS = 1e-12


class DomainError(ValueError):
    pass


@dataclass
class HeteroNorm:
    x_mean: np.ndarray = field(default_factory=lambda: np.zeros(4))
    x_std: np.ndarray = field(default_factory=lambda: np.ones(4))
    br_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    br_std: np.ndarray = field(default_factory=lambda: np.ones(3))
    line_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    line_std: np.ndarray = field(default_factory=lambda: np.ones(2))

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "HeteroNorm":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})

    @classmethod
    def fit(cls, graphs: list[HeteroGraph]) -> "HeteroNorm":
        def ms(a):
            s = a.std(0)
            return a.mean(0), np.where(s > 1e-9, s, 1.0)

        xm, xs = ms(np.vstack([g.x for g in graphs]))
        bm, bs = ms(np.vstack([g.br_attr for g in graphs]))
        lm, ls = ms(np.vstack([g.line_attr for g in graphs]))
        return cls(xm, xs, bm, bs, lm, ls)


class HeteroModel(Module):
    def __init__(self, hidden: int = 64, layers: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.hidden, self.n_layers, self.seed = hidden, layers, seed
        d = hidden
        self.embed = Linear(4, d, rng)
        self.phi_br = [MLP(2 * d + 3, d, d, rng) for _ in range(layers)]
        self.phi_line = [MLP(2 * d + 2, d, d, rng) for _ in range(layers)]
        scale = 1.0 / np.sqrt(d)
        self.w_br = [param(rng.uniform(-scale, scale, d)) for _ in range(layers)]
        self.w_line = [param(rng.uniform(-scale, scale, d)) for _ in range(layers)]
        self.gru = GRUCell(d, d, rng)
        self.head = MLP(2 * d + 3, d, 1, rng)
        self.norm = HeteroNorm()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = super().named_parameters(prefix)
        for k in range(self.n_layers):
            out.append((f"{prefix}w_br.{k}", self.w_br[k]))
            out.append((f"{prefix}w_line.{k}", self.w_line[k]))
        return out

    @property
    def arch(self) -> dict:
        return {"hidden": self.hidden, "layers": self.n_layers, "node_features": 4,
                "breaker_features": 3, "line_features": 2}

    def checkpoint(self, extra: dict | None = None) -> dict:
        return checkpoint_dict(self, "heterognn", self.arch, self.seed,
                               {"norm": self.norm.to_dict(), **(extra or {})})

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "HeteroModel":
        if ckpt.get("kind") != "heterognn":
            raise ValueError(f"expected a heterognn checkpoint, got {ckpt.get('kind')!r}")
        m = cls(ckpt["arch"]["hidden"], ckpt["arch"]["layers"], ckpt["seed"])
        load_params(m, ckpt)
        m.norm = HeteroNorm.from_dict(ckpt["extra"]["norm"])
        return m


def stack_graphs(graphs: list[HeteroGraph]) -> HeteroGraph:
    """Disjoint union of graphs (node indices offset per graph)."""
    offs = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    return HeteroGraph(
        x=np.vstack([g.x for g in graphs]),
        br_index=np.vstack([g.br_index + o for g, o in zip(graphs, offs)]),
        br_attr=np.vstack([g.br_attr for g in graphs]),
        line_index=np.vstack([g.line_index + o for g, o in zip(graphs, offs)]),
        line_attr=np.vstack([g.line_attr for g in graphs]),
    )


def type_attention(s_br: Tensor, s_line: Tensor, has_br: np.ndarray, has_line: np.ndarray) -> tuple[Tensor, Tensor]:
    """Softmax over the edge types present at each node."""
    both = has_br & has_line
    a_br = where(both, (s_br - s_line).sigmoid(), has_br.astype(float))
    a_line = where(has_line, 1.0 - a_br, 0.0)
    return a_br, a_line


@dataclass
class HeteroTrace:
    probs: Tensor
    attention: list[tuple[np.ndarray, np.ndarray]]


def hetero_forward(model: HeteroModel, hg: HeteroGraph, trace: bool = False):
    """Closure probabilities per breaker, shape (R,)."""
    nrm = model.norm
    n = hg.n_nodes
    if hg.x.shape[1:] != (4,) or hg.br_attr.shape[1:] != (3,) or hg.line_attr.shape[1:] != (2,):
        from .nn import ShapeMismatch

        raise ShapeMismatch("hetero graph feature dims must be 4 / 3 / 2")
    h = model.embed(Tensor((hg.x - nrm.x_mean) / nrm.x_std))
    bi, bj = hg.br_index[:, 0], hg.br_index[:, 1]
    li, lj = hg.line_index[:, 0], hg.line_index[:, 1]
    eb = (hg.br_attr - nrm.br_mean) / nrm.br_std
    eb_rev = eb[:, [0, 2, 1]]
    el = Tensor((hg.line_attr - nrm.line_mean) / nrm.line_std)
    br_dst = np.concatenate([bi, bj])
    br_src = np.concatenate([bj, bi])
    br_e = Tensor(np.vstack([eb, eb_rev]))
    ln_dst = np.concatenate([li, lj])
    ln_src = np.concatenate([lj, li])
    ln_e = concat([el, el], axis=0)
    cnt_br = np.bincount(br_dst, minlength=n).astype(float)
    cnt_ln = np.bincount(ln_dst, minlength=n).astype(float)
    has_br, has_ln = cnt_br > 0, cnt_ln > 0
    att = []
    for k in range(model.n_layers):
        mb = model.phi_br[k](concat([gather(h, br_dst), gather(h, br_src), br_e], axis=1))
        ml = model.phi_line[k](concat([gather(h, ln_dst), gather(h, ln_src), ln_e], axis=1))
        sum_b = segment_sum(mb, br_dst, n)
        sum_l = segment_sum(ml, ln_dst, n)
        mean_b = sum_b * (1.0 / np.maximum(cnt_br, 1.0)).reshape(-1, 1)
        mean_l = sum_l * (1.0 / np.maximum(cnt_ln, 1.0)).reshape(-1, 1)
        s_b = mean_b @ model.w_br[k].reshape(-1, 1)
        s_l = mean_l @ model.w_line[k].reshape(-1, 1)
        a_b, a_l = type_attention(s_b.reshape(-1), s_l.reshape(-1), has_br, has_ln)
        if trace:
            att.append((a_b.data.copy(), a_l.data.copy()))
        m = sum_b * a_b.reshape(-1, 1) + sum_l * a_l.reshape(-1, 1)
        h = model.gru(m, h)
    logits = model.head(concat([gather(h, bi), gather(h, bj), Tensor(eb)], axis=1)).reshape(-1)
    probs = logits.sigmoid()
    return HeteroTrace(probs, att) if trace else probs


_clamp_events = {"count": 0}


def clamp_events() -> int:
    return _clamp_events["count"]


def bce_loss(probs, labels) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-12, 1-1e-12]."""
    probs = as_tensor(probs)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if probs.shape != y.shape:
        from .lgnn import LengthMismatch

        raise LengthMismatch(f"{probs.shape} probabilities for {y.shape} labels")
    if np.any(~np.isfinite(probs.data)) or np.any((probs.data < 0) | (probs.data > 1)):
        raise DomainError("probabilities must lie in [0, 1]")
    outside = (probs.data < EPS) | (probs.data > 1 - EPS)
    if outside.any():
        _clamp_events["count"] += int(outside.sum())
    p = probs.clip(EPS, 1 - EPS)
    return -(p.log() * y + (1.0 - p).log() * (1.0 - y)).mean()


def instance_graph(nbg: NodeBreakerGraph, inst: Instance) -> HeteroGraph:
    """Input graph with the all-closed base status on every breaker."""
    return build_hetero_graph(nbg, nbg.all_closed(), inst)


def predict_proba(model: HeteroModel, nbg: NodeBreakerGraph, inst: Instance) -> np.ndarray:
    return hetero_forward(model, instance_graph(nbg, inst)).data.copy()


def predict_breakers(model: HeteroModel, nbg: NodeBreakerGraph, inst: Instance, threshold: float = 0.5) -> np.ndarray:
    """Binary configuration: 1 (closed) where the probability reaches the threshold."""
    return (predict_proba(model, nbg, inst) >= threshold).astype(int)

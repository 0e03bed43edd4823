"""Physics-informed losses and the breaker-predictor training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid_model import BASE_MVA, Instance, NodeBreakerGraph
from .heterognn import HeteroModel, HeteroNorm, bce_loss, hetero_forward, instance_graph, stack_graphs
from .lgnn import EmptyDataset, LgnnModel, PsiOutput, PsiStructure, psi_forward
from .nn import Adam, Tensor, as_tensor, gather, padded_prod, segment_sum, straight_through
from .topo import BusBranchGraph, HeteroGraph, to_bus_branch


def redistribute_injections(nbg: NodeBreakerGraph, inst: Instance, lam: float, mu: float) -> tuple[np.ndarray, np.ndarray]:
    """Zone-scaled substation totals spread evenly over all busbars of the substation.

    Zone-1 generation is scaled by ``lam`` and Zone-2 load by ``mu``; the
    other two quantities keep their base values. Substation totals are
    conserved whatever the breaker states.
    """
    S = nbg.n_substations
    zone = np.asarray(nbg.spec.zone_of)
    gen = np.bincount(nbg.busbar_sub, weights=inst.gen, minlength=S)
    load = np.bincount(nbg.busbar_sub, weights=inst.load, minlength=S)
    gen = np.where(zone == 1, lam * gen, gen)
    load = np.where(zone == 2, mu * load, load)
    count = np.bincount(nbg.busbar_sub, minlength=S)
    return gen[nbg.busbar_sub] / count[nbg.busbar_sub], load[nbg.busbar_sub] / count[nbg.busbar_sub]


# ---------------------------------------------------------------------------
# losses


def flow_consistency_loss(flows, pg: np.ndarray, pd: np.ndarray, bbg: BusBranchGraph, scale: float = 1.0) -> Tensor:
    """Sum over bus-branch buses of the squared KCL residual.

    The residual of a bus is its signed line outflow minus its net
    injection. ``pg``/``pd`` are per busbar; ``scale`` divides flows and
    injections first (e.g. the MVA base for per-unit values).
    """
    flows = as_tensor(flows)
    nb = bbg.n_buses
    inj = bbg.bus_injection(np.asarray(pg) - np.asarray(pd)) / scale
    br = bbg.branches
    out = segment_sum(flows * (1.0 / scale), br[:, 0], nb) - segment_sum(flows * (1.0 / scale), br[:, 1], nb)
    return ((out - inj) ** 2).sum()


def soft_flow_consistency(psi: PsiOutput, st: PsiStructure, scale: float = BASE_MVA) -> Tensor:
    """Per-configuration KCL loss on the soft topology, normalised per busbar.

    Summing busbar residuals over a bus and squaring equals r^T W r within
    each substation, where W holds the same-bus weights. Matches
    ``flow_consistency_loss / (scale^2 * B)`` at binary breaker states.
    Returns one value per stacked configuration.
    """
    n, B, L, Q = psi.topo.n, st.n_busbars, st.n_lines, st.n_pairs
    f = psi.flows * (1.0 / scale)
    lb = np.concatenate([st.line_busbars + k * B for k in range(n)])
    r = segment_sum(f, lb[:, 0], n * B) - segment_sum(f, lb[:, 1], n * B) - psi.busbar_injection / scale
    off = np.repeat(np.arange(n), Q) * B
    pp = np.tile(st.pair_p, n) + off
    pq = np.tile(st.pair_q, n) + off
    terms = psi.topo.w * gather(r, pp) * gather(r, pq)
    return segment_sum(terms, np.repeat(np.arange(n), Q), n) * (1.0 / B)


def capacity_penalty(flows, limit: np.ndarray, n: int = 1) -> Tensor:
    """Per configuration: mean over lines of relu(|f|/Fmax - 1)^2."""
    flows = as_tensor(flows)
    lim = np.tile(np.asarray(limit, float), n)
    over = (flows.abs() * (1.0 / lim) - 1.0).relu()
    L = lim.size // n
    return segment_sum(over**2, np.repeat(np.arange(n), L), n) * (1.0 / L)


def _ring_incidence(nbg: NodeBreakerGraph) -> np.ndarray:
    """(K, 2) breakers of each ring busbar (substations with one breaker are exempt)."""
    inc = nbg.busbar_breakers()
    rows = [inc[b] for b in range(nbg.n_busbars) if len(nbg.sub_breakers[nbg.busbar_sub[b]]) > 1]
    width = max([len(r) for r in rows] + [1])
    return np.array([r + [-1] * (width - len(r)) for r in rows], dtype=int).reshape(-1, width)


def dangling_penalty(probs, nbg: NodeBreakerGraph, n: int = 1) -> Tensor:
    """Per configuration: sum over busbars of prod over incident breakers of (1 - p)."""
    probs = as_tensor(probs)
    inc = _ring_incidence(nbg)
    R = nbg.n_breakers
    idx = np.concatenate([np.where(inc >= 0, inc + k * R, -1) for k in range(n)])
    open_all = padded_prod(1.0 - probs, idx)
    return segment_sum(open_all, np.repeat(np.arange(n), inc.shape[0]), n)


def group_penalty(z_hard: np.ndarray, nbg: NodeBreakerGraph, n: int = 1) -> Tensor:
    """Per configuration: sum over substations of max(0, components - 2); no gradient."""
    zz = np.asarray(z_hard).reshape(n, -1)
    vals = [float(np.maximum(to_bus_branch(nbg, z).components - 2, 0).sum()) for z in zz]
    return Tensor(np.array(vals))


def feasibility_penalties(probs, flows, nbg: NodeBreakerGraph, threshold: float = 0.5,
                          n: int = 1) -> tuple[Tensor, Tensor, Tensor]:
    """(L_cap, L_dangling, L_group), each one value per stacked configuration."""
    probs = as_tensor(probs)
    return (capacity_penalty(flows, nbg.limit, n), dangling_penalty(probs, nbg, n),
            group_penalty(probs.data >= threshold, nbg, n))


@dataclass(frozen=True)
class LossWeights:
    rho1: float = 1.2
    rho2: float = 2.0

    def __post_init__(self):
        if self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("loss weights must be non-negative")


ABLATIONS = {
    "full": LossWeights(1.2, 2.0),
    "no_flow": LossWeights(0.0, 2.0),
    "no_feasibility": LossWeights(1.2, 0.0),
}


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class LossBreakdown:
    L_br: float
    L_flow: float
    L_cap: float
    L_dangling: float
    L_group: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in ("L_br", "L_flow", "L_cap", "L_dangling", "L_group", "total")}


def total_loss(parts: dict, weights: LossWeights) -> LossBreakdown:
    """L_br + rho1 L_flow + rho2 (L_cap + L_dangling + L_group).

    ``parts`` maps names to scalar tensors or floats. A zero weight drops
    its terms from the graph entirely.
    """
    ts = {k: as_tensor(parts.get(k, 0.0)) for k in ("L_br", "L_flow", "L_cap", "L_dangling", "L_group")}
    vals = {k: float(t.data) for k, t in ts.items()}
    if not all(np.isfinite(v) for v in vals.values()):
        raise NonFiniteLoss(f"non-finite loss component: {vals}")
    total = ts["L_br"]
    if weights.rho1:
        total = total + ts["L_flow"] * weights.rho1
    if weights.rho2:
        total = total + (ts["L_cap"] + ts["L_dangling"] + ts["L_group"]) * weights.rho2
    exact = vals["L_br"] + weights.rho1 * vals["L_flow"] + weights.rho2 * (vals["L_cap"] + vals["L_dangling"] + vals["L_group"])
    return LossBreakdown(**vals, total=exact, tensor=total)


# ---------------------------------------------------------------------------
# training


class MissingCheckpoint(FileNotFoundError):
    pass


@dataclass
class LabeledInstance:
    inst: Instance
    z: np.ndarray
    lam: float
    mu: float
    solver_time: float = float("nan")
    method: str = ""


@dataclass
class HeteroHyper:
    hidden: int = 64
    layers: int = 4
    lr: float = 1e-3
    batch: int = 16
    epochs: int = 300
    patience: int = 20
    seed: int = 0
    threshold: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)


class HeteroTrainer:
    """Evaluates the composite loss for batches of labelled instances of one grid."""

    def __init__(self, nbg: NodeBreakerGraph, lgnn: LgnnModel | None, hyper: HeteroHyper):
        if lgnn is None and (hyper.weights.rho1 or hyper.weights.rho2):
            raise MissingCheckpoint("flow and feasibility terms need a pretrained LGNN")
        self.nbg, self.lgnn, self.hyper = nbg, lgnn, hyper
        if lgnn is not None:
            lgnn.freeze()
        self.st = PsiStructure.build(nbg)
        self._graphs: dict[int, HeteroGraph] = {}
        self._inj: dict[int, np.ndarray] = {}

    def _prep(self, item: LabeledInstance) -> tuple[HeteroGraph, np.ndarray]:
        key = id(item)
        if key not in self._graphs:
            self._graphs[key] = instance_graph(self.nbg, item.inst)
            pg, pd = redistribute_injections(self.nbg, item.inst, item.lam, item.mu)
            self._inj[key] = pg - pd
        return self._graphs[key], self._inj[key]

    def batch_loss(self, model: HeteroModel, items: list[LabeledInstance]) -> LossBreakdown:
        n = len(items)
        prepped = [self._prep(it) for it in items]
        probs = hetero_forward(model, stack_graphs([g for g, _ in prepped]))
        labels = np.concatenate([np.asarray(it.z, float) for it in items])
        parts: dict = {"L_br": bce_loss(probs, labels)}
        w = self.hyper.weights
        hard = probs.data >= self.hyper.threshold
        if w.rho1 or w.rho2:
            z_st = straight_through(hard.astype(float), probs)
            psi = psi_forward(self.lgnn, self.st, z_st, np.concatenate([i for _, i in prepped]), n)
            parts["L_flow"] = soft_flow_consistency(psi, self.st).mean()
            cap, dang, grp = feasibility_penalties(probs, psi.flows, self.nbg, self.hyper.threshold, n)
            parts.update(L_cap=cap.mean(), L_dangling=dang.mean(), L_group=grp.mean())
        return total_loss(parts, w)

    def evaluate(self, model: HeteroModel, items: list[LabeledInstance]) -> dict:
        sums: dict[str, float] = {}
        for k in range(0, len(items), 64):
            chunk = items[k:k + 64]
            row = self.batch_loss(model, chunk).row()
            for name, v in row.items():
                sums[name] = sums.get(name, 0.0) + v * len(chunk)
        return {name: v / max(len(items), 1) for name, v in sums.items()}


def train_hetero(train: list[LabeledInstance], val: list[LabeledInstance], nbg: NodeBreakerGraph,
                 lgnn: LgnnModel | None, hyper: HeteroHyper | None = None, log=None) -> tuple[HeteroModel, list[dict]]:
    """Adam on the composite loss with a frozen LGNN; keeps the best-validation parameters."""
    hyper = hyper or HeteroHyper()
    if not train:
        raise EmptyDataset("no labelled instances to train on")
    val = val or train
    trainer = HeteroTrainer(nbg, lgnn, hyper)
    model = HeteroModel(hyper.hidden, hyper.layers, hyper.seed)
    model.norm = HeteroNorm.fit([trainer._prep(it)[0] for it in train])
    opt = Adam(model.parameters(), hyper.lr)
    rng = np.random.default_rng(hyper.seed + 1)
    v0 = trainer.evaluate(model, val)
    best = (v0["total"], [p.data.copy() for p in model.parameters()])
    rows = [{"epoch": 0, **{f"train_{k}": float("nan") for k in v0}, **{f"val_{k}": v for k, v in v0.items()}}]
    stale = 0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(train))
        sums: dict[str, float] = {}
        for k in range(0, len(order), hyper.batch):
            chunk = [train[i] for i in order[k:k + hyper.batch]]
            lb = trainer.batch_loss(model, chunk)
            opt.zero_grad()
            lb.tensor.backward()
            opt.step()
            for name, v in lb.row().items():
                sums[name] = sums.get(name, 0.0) + v * len(chunk)
        vm = trainer.evaluate(model, val)
        row = {"epoch": epoch, **{f"train_{k}": v / len(train) for k, v in sums.items()},
               **{f"val_{k}": v for k, v in vm.items()}}
        rows.append(row)
        if log:
            log(row)
        if vm["total"] < best[0] - 1e-12:
            best, stale = (vm["total"], [p.data.copy() for p in model.parameters()]), 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    for p, d in zip(model.parameters(), best[1]):
        p.data[...] = d
    return model, rows

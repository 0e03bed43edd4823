"""Line-graph network predicting DC line flows, and the flow encoder psi.

Each transmission line is a node. Lines touching a common bus-branch bus
exchange messages. Node features are ``[X, Fmax, inj(C_from), inj(C_to)]``
and edge features ``[sum of shared bus injections, shared split flag]``.

psi runs the same network on a *gated* line graph. Candidate edges are all
line pairs meeting in a substation; the gate of a pair is the probability
that both lines land on the same bus given breaker states ``z``. For binary
``z`` the gates are exactly 0/1, so the gated forward coincides with the
forward on the contracted graph while remaining differentiable in ``z``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dcopf import solve_dcopf
from .grid_model import BASE_MVA, Instance, NodeBreakerGraph
from .nn import MLP, Adam, Linear, Module, Tensor, as_tensor, concat, gather, padded_prod, segment_sum
from .nn.checkpoint import checkpoint_dict, load_params
from .topo import LineGraph, build_line_graph, random_feasible_config, to_bus_branch


class LengthMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass
class FeatureNorm:
    x_mean: np.ndarray = field(default_factory=lambda: np.zeros(4))
    x_std: np.ndarray = field(default_factory=lambda: np.ones(4))
    e_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    e_std: np.ndarray = field(default_factory=lambda: np.ones(2))
    flow_scale: float = BASE_MVA

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureNorm":
        return cls(np.asarray(d["x_mean"]), np.asarray(d["x_std"]), np.asarray(d["e_mean"]),
                   np.asarray(d["e_std"]), float(d["flow_scale"]))

    @classmethod
    def fit(cls, graphs: list[LineGraph], flows: list[np.ndarray]) -> "FeatureNorm":
        x = np.vstack([g.x for g in graphs])
        e = np.vstack([g.edge_attr for g in graphs if g.n_edges] or [np.zeros((1, 2))])
        f = np.concatenate(flows)
        safe = lambda s: np.where(s > 1e-9, s, 1.0)  # noqa: E731
        rms = float(np.sqrt(np.mean(f**2))) if f.size else 1.0
        return cls(x.mean(0), safe(x.std(0)), e.mean(0), safe(e.std(0)), rms if rms > 1e-9 else 1.0)


class LgnnModel(Module):
    def __init__(self, hidden: int = 64, layers: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.hidden, self.n_layers, self.seed = hidden, layers, seed
        self.embed = Linear(4, hidden, rng)
        self.msg = [MLP(2 * hidden + 2, hidden, hidden, rng) for _ in range(layers)]
        self.upd = [MLP(2 * hidden, hidden, hidden, rng) for _ in range(layers)]
        self.decoder = Linear(hidden, 1, rng)
        self.norm = FeatureNorm()

    @property
    def arch(self) -> dict:
        return {"hidden": self.hidden, "layers": self.n_layers, "node_features": 4, "edge_features": 2}

    def checkpoint(self) -> dict:
        return checkpoint_dict(self, "lgnn", self.arch, self.seed, {"norm": self.norm.to_dict()})

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "LgnnModel":
        if ckpt.get("kind") != "lgnn":
            raise ValueError(f"expected an lgnn checkpoint, got {ckpt.get('kind')!r}")
        m = cls(ckpt["arch"]["hidden"], ckpt["arch"]["layers"], ckpt["seed"])
        load_params(m, ckpt)
        m.norm = FeatureNorm.from_dict(ckpt["extra"]["norm"])
        return m

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None


def _core(model: LgnnModel, x, src: np.ndarray, dst: np.ndarray, eattr, gate=None) -> Tensor:
    """Message passing on raw (unnormalised) features; returns flows in MW."""
    x, eattr = as_tensor(x), as_tensor(eattr)
    if x.shape[-1] != 4 or (eattr.shape[0] and eattr.shape[-1] != 2):
        from .nn import ShapeMismatch

        raise ShapeMismatch(f"line graph features {x.shape} / {eattr.shape}")
    nrm = model.norm
    n = x.shape[0]
    h = model.embed((x - nrm.x_mean) * (1.0 / nrm.x_std))
    e = (eattr - nrm.e_mean) * (1.0 / nrm.e_std)
    for msg, upd in zip(model.msg, model.upd):
        if len(src):
            m = msg(concat([gather(h, dst), gather(h, src), e], axis=1))
            if gate is not None:
                m = m * as_tensor(gate).reshape(-1, 1)
            agg = segment_sum(m, dst, n)
        else:
            agg = Tensor(np.zeros((n, model.hidden)))
        h = upd(concat([h, agg], axis=1))
    return model.decoder(h).reshape(-1) * nrm.flow_scale


def lgnn_forward(model: LgnnModel, lg: LineGraph) -> Tensor:
    ei = lg.edge_index.reshape(-1, 2)
    return _core(model, lg.x, ei[:, 0], ei[:, 1], lg.edge_attr.reshape(-1, 2))


def lgnn_loss(pred, target) -> Tensor:
    """Mean squared error over lines."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=float)
    if pred.shape != target.shape:
        raise LengthMismatch(f"{pred.shape} predictions for {target.shape} targets")
    return ((pred - target) ** 2).mean()


# ---------------------------------------------------------------------------
# datasets and training


@dataclass
class FlowSample:
    graph: LineGraph
    flows: np.ndarray


def flow_sample(nbg: NodeBreakerGraph, inst: Instance, z) -> FlowSample | None:
    """Fixed-topology DCOPF flows as the target; None when z admits no dispatch."""
    bbg = to_bus_branch(nbg, z, inst)
    sol = solve_dcopf(nbg, z, inst, check=False, bbg=bbg)
    if not sol.feasible:
        return None
    return FlowSample(build_line_graph(bbg, nbg, inst, sol.lam, sol.mu), np.asarray(sol.line_flow, float))


def make_flow_dataset(nbg: NodeBreakerGraph, instances: list[Instance], label_configs: list,
                      n_random: int = 5, seed: int = 0) -> list[FlowSample]:
    """Labelled optima plus ``n_random`` random legal topologies per instance."""
    rng = np.random.default_rng(seed)
    out = []
    for inst, z in zip(instances, label_configs):
        configs = ([z] if z is not None else []) + [random_feasible_config(nbg, rng) for _ in range(n_random)]
        for c in configs:
            s = flow_sample(nbg, inst, c)
            if s is not None:
                out.append(s)
    return out


def batch_graphs(graphs: list[LineGraph]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    xs, src, dst, es = [], [], [], []
    off = 0
    for g in graphs:
        xs.append(g.x)
        ei = g.edge_index.reshape(-1, 2)
        src.append(ei[:, 0] + off)
        dst.append(ei[:, 1] + off)
        es.append(g.edge_attr.reshape(-1, 2))
        off += g.n_nodes
    return np.vstack(xs), np.concatenate(src), np.concatenate(dst), np.vstack(es)


def _predict_batch(model: LgnnModel, samples: list[FlowSample]) -> Tensor:
    x, src, dst, e = batch_graphs([s.graph for s in samples])
    return _core(model, x, src, dst, e)


def dataset_mse(model: LgnnModel, samples: list[FlowSample], batch: int = 64) -> float:
    se, n = 0.0, 0
    for k in range(0, len(samples), batch):
        chunk = samples[k:k + batch]
        pred = _predict_batch(model, chunk).data
        f = np.concatenate([s.flows for s in chunk])
        se += float(np.sum((pred - f) ** 2))
        n += f.size
    return se / max(n, 1)


def zero_baseline_mse(samples: list[FlowSample]) -> float:
    f = np.concatenate([s.flows for s in samples])
    return float(np.mean(f**2))


@dataclass
class LgnnHyper:
    hidden: int = 64
    layers: int = 3
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 200
    patience: int = 20
    seed: int = 0


def train_lgnn(train: list[FlowSample], val: list[FlowSample], hyper: LgnnHyper | None = None,
               log=None) -> tuple[LgnnModel, list[dict]]:
    """Adam on normalised MSE; returns the best-validation model and the curve."""
    hyper = hyper or LgnnHyper()
    if not train:
        raise EmptyDataset("no LGNN training samples")
    val = val or train
    model = LgnnModel(hyper.hidden, hyper.layers, hyper.seed)
    model.norm = FeatureNorm.fit([s.graph for s in train], [s.flows for s in train])
    opt = Adam(model.parameters(), hyper.lr)
    rng = np.random.default_rng(hyper.seed + 1)
    scale2 = model.norm.flow_scale**2
    best = (dataset_mse(model, val), [p.data.copy() for p in model.parameters()])
    curve = [{"epoch": 0, "train_mse": dataset_mse(model, train), "val_mse": best[0]}]
    stale = 0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(train))
        tot, cnt = 0.0, 0
        for k in range(0, len(order), hyper.batch):
            chunk = [train[i] for i in order[k:k + hyper.batch]]
            pred = _predict_batch(model, chunk)
            f = np.concatenate([s.flows for s in chunk])
            loss = lgnn_loss(pred, f) * (1.0 / scale2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * scale2 * len(chunk)
            cnt += len(chunk)
        v = dataset_mse(model, val)
        curve.append({"epoch": epoch, "train_mse": tot / cnt, "val_mse": v})
        if log:
            log(curve[-1])
        if v < best[0] - 1e-12:
            best, stale = (v, [p.data.copy() for p in model.parameters()]), 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    for p, d in zip(model.parameters(), best[1]):
        p.data[...] = d
    return model, curve


# ---------------------------------------------------------------------------
# gated line graph used by psi


_ZERO = -2  # index sentinel for the constant 0 appended after z


@dataclass
class PsiStructure:
    """Index tables describing candidate connectivity of one grid."""

    n_busbars: int
    n_lines: int
    n_breakers: int
    n_subs: int
    pair_p: np.ndarray  # ordered busbar pairs within a substation (p may equal q)
    pair_q: np.ndarray
    arc_a: np.ndarray  # (Q, m) breakers whose joint closure connects p and q one way
    arc_b: np.ndarray  # the other way round the ring; _ZERO where no such path
    sub_all: np.ndarray  # (S, m) breakers of each substation
    sub_ring: np.ndarray  # (S,) bool
    loo: np.ndarray  # (K, m) ring breakers minus one
    loo_out: np.ndarray  # (K,) the excluded breaker
    loo_sub: np.ndarray  # (K,)
    lp_a: np.ndarray  # line pairs sharing a substation, a < b
    lp_b: np.ndarray
    cand_lp: np.ndarray  # (C,) line pair of each (pair, shared substation) candidate
    cand_q: np.ndarray  # (C,) index into pair tables for the two attach busbars
    cand_sub: np.ndarray
    cand_slot: np.ndarray  # (C,) position of the candidate among those of its line pair
    line_busbars: np.ndarray
    reactance: np.ndarray
    limit: np.ndarray

    @classmethod
    def build(cls, nbg: NodeBreakerGraph) -> "PsiStructure":
        width = max([len(b) for b in nbg.sub_breakers] + [1])
        pad = lambda rows: np.array([r + [-1] * (width - len(r)) for r in rows], dtype=int).reshape(-1, width)  # noqa: E731
        pp, pq, aa, ab = [], [], [], []
        qidx: dict[tuple[int, int], int] = {}
        for s in range(nbg.n_substations):
            bus, brk = nbg.sub_busbars[s], nbg.sub_breakers[s]
            n = len(bus)
            ring = len(brk) == n and n > 2
            for i in range(n):
                for j in range(n):
                    qidx[(bus[i], bus[j])] = len(pp)
                    pp.append(bus[i])
                    pq.append(bus[j])
                    if i == j:
                        aa.append([])
                        ab.append([_ZERO])
                    elif ring:
                        lo, hi = min(i, j), max(i, j)
                        aa.append([brk[k] for k in range(lo, hi)])
                        ab.append([brk[k] for k in list(range(hi, n)) + list(range(lo))])
                    else:
                        aa.append(list(brk))
                        ab.append([_ZERO])
        sub_all, ring_flag, loo, loo_out, loo_sub = [], [], [], [], []
        for s in range(nbg.n_substations):
            brk = list(nbg.sub_breakers[s])
            sub_all.append(brk)
            ring = len(brk) > 1
            ring_flag.append(ring)
            if ring:
                for k, r in enumerate(brk):
                    loo.append(brk[:k] + brk[k + 1:])
                    loo_out.append(r)
                    loo_sub.append(s)
        lines_at: dict[int, list[tuple[int, int]]] = {}
        for l, (bf, bt) in enumerate(nbg.line_busbars):
            for b in (bf, bt):
                lines_at.setdefault(int(nbg.busbar_sub[b]), []).append((l, int(b)))
        lp_index: dict[tuple[int, int], int] = {}
        cand_lp, cand_q, cand_sub = [], [], []
        for s in sorted(lines_at):
            items = sorted(lines_at[s])
            for i in range(len(items)):
                for j in range(i + 1, len(items)):
                    (la, ba), (lb, bb) = items[i], items[j]
                    key = (la, lb)
                    if key not in lp_index:
                        lp_index[key] = len(lp_index)
                    cand_lp.append(lp_index[key])
                    cand_q.append(qidx[(ba, bb)])
                    cand_sub.append(s)
        keys = sorted(lp_index, key=lp_index.get)
        seen: dict[int, int] = {}
        cand_slot = []
        for lp in cand_lp:
            cand_slot.append(seen.get(lp, 0))
            seen[lp] = cand_slot[-1] + 1
        return cls(
            n_busbars=nbg.n_busbars, n_lines=nbg.n_lines, n_breakers=nbg.n_breakers, n_subs=nbg.n_substations,
            pair_p=np.array(pp, dtype=int), pair_q=np.array(pq, dtype=int), arc_a=pad(aa), arc_b=pad(ab),
            sub_all=pad(sub_all), sub_ring=np.array(ring_flag, dtype=bool),
            loo=pad(loo), loo_out=np.array(loo_out, dtype=int), loo_sub=np.array(loo_sub, dtype=int),
            lp_a=np.array([k[0] for k in keys], dtype=int), lp_b=np.array([k[1] for k in keys], dtype=int),
            cand_lp=np.array(cand_lp, dtype=int), cand_q=np.array(cand_q, dtype=int),
            cand_sub=np.array(cand_sub, dtype=int), cand_slot=np.array(cand_slot, dtype=int),
            line_busbars=nbg.line_busbars.copy(), reactance=nbg.reactance, limit=nbg.limit,
        )

    @property
    def n_pairs(self) -> int:
        return self.pair_p.size

    @property
    def n_line_pairs(self) -> int:
        return self.lp_a.size


def _tile_idx(idx: np.ndarray, n: int, step: int, zero: int | None = None) -> np.ndarray:
    """Repeat an index table for ``n`` stacked copies, shifting valid entries."""
    out = np.concatenate([np.where(idx >= 0, idx + k * step, idx) for k in range(n)])
    if zero is not None:
        out = np.where(out == _ZERO, zero, out)
    return out


@dataclass
class SoftTopology:
    w: Tensor  # (n*Q,) same-bus weight per ordered busbar pair
    split: Tensor  # (n*S,) split indicator per substation
    n: int


def soft_topology(st: PsiStructure, z: Tensor, n: int = 1) -> SoftTopology:
    """Same-bus weights and split flags as polynomials in z (exact at 0/1).

    ``z`` stacks ``n`` breaker vectors of length R.
    """
    z = as_tensor(z)
    R = st.n_breakers
    zext = concat([z.reshape(-1), Tensor(np.zeros(1))], axis=0)
    zero = n * R
    pa = padded_prod(zext, _tile_idx(st.arc_a, n, R, zero))
    pb = padded_prod(zext, _tile_idx(st.arc_b, n, R, zero))
    w = pa + pb - pa * pb
    closed_all = padded_prod(zext, _tile_idx(st.sub_all, n, R, zero))
    ring = np.tile(st.sub_ring, n).astype(float)
    # rings: split iff at least two breakers open; single breaker: split iff open
    if st.loo.shape[0]:
        loo = padded_prod(zext, _tile_idx(st.loo, n, R, zero))
        out_z = gather(zext, np.concatenate([st.loo_out + k * R for k in range(n)]))
        one_open = segment_sum((1.0 - out_z) * loo, np.concatenate([st.loo_sub + k * st.n_subs for k in range(n)]),
                               n * st.n_subs)
        split = 1.0 - closed_all - one_open * ring
    else:
        split = 1.0 - closed_all
    return SoftTopology(w, split, n)


@dataclass
class PsiOutput:
    flows: Tensor  # (n*L,) MW
    topo: SoftTopology
    busbar_injection: np.ndarray  # (n*B,) MW


def psi_forward(model: LgnnModel, st: PsiStructure, z: Tensor, busbar_injection: np.ndarray, n: int = 1) -> PsiOutput:
    """Batched, differentiable psi on ``n`` stacked configurations."""
    B, L, Q, S, P = st.n_busbars, st.n_lines, st.n_pairs, st.n_subs, st.n_line_pairs
    topo = soft_topology(st, z, n)
    inj = np.asarray(busbar_injection, float).reshape(-1)
    off_q = np.repeat(np.arange(n), Q)
    pair_p = np.tile(st.pair_p, n) + off_q * B
    pair_q = np.tile(st.pair_q, n) + off_q * B
    comp_inj = segment_sum(topo.w * inj[pair_q], pair_p, n * B)  # injection of each busbar's bus
    lb = np.concatenate([st.line_busbars + k * B for k in range(n)])
    x = concat([Tensor(np.tile(np.column_stack([st.reactance, st.limit]), (n, 1))),
                gather(comp_inj, lb[:, 0]).reshape(-1, 1), gather(comp_inj, lb[:, 1]).reshape(-1, 1)], axis=1)
    C = st.cand_lp.size
    off_c = np.repeat(np.arange(n), C)
    cq = np.tile(st.cand_q, n) + off_c * Q
    clp = np.tile(st.cand_lp, n) + off_c * P
    csub = np.tile(st.cand_sub, n) + off_c * S
    wc = gather(topo.w, cq)
    shared_inj = segment_sum(wc * gather(comp_inj, pair_p[cq]), clp, n * P)
    # OR over shared substations of (same bus AND split): 1 - prod(1 - w * split)
    table = -np.ones((n * P, st.cand_slot.max(initial=0) + 1), dtype=int)
    table[clp, np.tile(st.cand_slot, n)] = np.arange(n * C)
    not_shared = padded_prod(1.0 - wc, table)
    not_split_shared = padded_prod(1.0 - wc * gather(topo.split, csub), table)
    gate_p = 1.0 - not_shared
    split_p = 1.0 - not_split_shared
    eattr = concat([shared_inj.reshape(-1, 1), split_p.reshape(-1, 1)], axis=1)
    a = np.concatenate([st.lp_a + k * L for k in range(n)])
    b = np.concatenate([st.lp_b + k * L for k in range(n)])
    idx2 = np.concatenate([np.arange(n * P), np.arange(n * P)])
    src = np.concatenate([a, b])
    dst = np.concatenate([b, a])
    flows = _core(model, x, src, dst, gather(eattr, idx2), gather(gate_p, idx2))
    return PsiOutput(flows, topo, inj)


def flow_encoder_psi(model: LgnnModel, nbg: NodeBreakerGraph, z, inst: Instance, lam: float, mu: float,
                     st: PsiStructure | None = None) -> np.ndarray:
    """Predicted line flows (MW) for configuration z with redistributed injections.

    A 2-D ``z`` holds one configuration per row and gives one row of flows each.
    """
    from .train_pipeline import redistribute_injections

    st = st or PsiStructure.build(nbg)
    pg, pd = redistribute_injections(nbg, inst, lam, mu)
    z = np.asarray(z, dtype=float)
    n = 1 if z.ndim == 1 else z.shape[0]
    out = psi_forward(model, st, Tensor(z.reshape(-1)), np.tile(pg - pd, n), n).flows.data.copy()
    return out if z.ndim == 1 else out.reshape(n, -1)

"""Topology transforms: node-breaker -> bus-branch, line graph, hetero graph."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid_model import Instance, NodeBreakerGraph


class UnionFind:
    """Disjoint sets over 0..n-1 with path halving and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.n_sets = n

    def find(self, a: int) -> int:
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.n_sets -= 1
        return True

    def labels(self) -> np.ndarray:
        """Dense labels numbered by first appearance (so lowest index first)."""
        out = np.empty(len(self.parent), dtype=int)
        seen: dict[int, int] = {}
        for i in range(len(self.parent)):
            r = self.find(i)
            if r not in seen:
                seen[r] = len(seen)
            out[i] = seen[r]
        return out


def as_config(nbg: NodeBreakerGraph, z) -> np.ndarray:
    z = np.asarray(z)
    if z.shape != (nbg.n_breakers,):
        raise ValueError(f"breaker config has shape {z.shape}, expected ({nbg.n_breakers},)")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("breaker config must be 0/1")
    return z.astype(int)


@dataclass
class BusBranchGraph:
    busbar_bus: np.ndarray  # bus id of every busbar
    bus_sub: np.ndarray
    bus_gen: np.ndarray  # summed base generation capacity per bus
    bus_load: np.ndarray
    branches: np.ndarray  # (L, 2) bus endpoints of each line
    reactance: np.ndarray
    limit: np.ndarray
    components: np.ndarray  # per substation component count
    bus_zone: np.ndarray

    @property
    def n_buses(self) -> int:
        return self.bus_sub.size

    @property
    def split(self) -> np.ndarray:
        return self.components > 1

    def bus_injection(self, busbar_values: np.ndarray) -> np.ndarray:
        return np.bincount(self.busbar_bus, weights=busbar_values, minlength=self.n_buses)

    def islands(self) -> np.ndarray:
        """Island label per bus (connectivity through lines)."""
        uf = UnionFind(self.n_buses)
        for a, b in self.branches:
            uf.union(int(a), int(b))
        return uf.labels()

    def to_dict(self) -> dict:
        return {
            "busbar_bus": self.busbar_bus.tolist(),
            "bus_sub": self.bus_sub.tolist(),
            "bus_gen": self.bus_gen.tolist(),
            "bus_load": self.bus_load.tolist(),
            "branches": self.branches.tolist(),
            "components_per_substation": self.components.tolist(),
        }


def busbar_components(nbg: NodeBreakerGraph, z) -> np.ndarray:
    uf = UnionFind(nbg.n_busbars)
    for r in np.nonzero(np.asarray(z) == 1)[0]:
        i, j = nbg.breakers[r]
        uf.union(int(i), int(j))
    return uf.labels()


def to_bus_branch(nbg: NodeBreakerGraph, z, inst: Instance | None = None) -> BusBranchGraph:
    z = as_config(nbg, z)
    labels = busbar_components(nbg, z)
    n_bus = int(labels.max()) + 1 if labels.size else 0
    bus_sub = np.zeros(n_bus, dtype=int)
    bus_sub[labels] = nbg.busbar_sub
    components = np.bincount(bus_sub, minlength=nbg.n_substations)
    if inst is None:
        gen = np.zeros(nbg.n_busbars)
        load = np.zeros(nbg.n_busbars)
    else:
        gen, load = inst.gen, inst.load
    return BusBranchGraph(
        busbar_bus=labels,
        bus_sub=bus_sub,
        bus_gen=np.bincount(labels, weights=gen, minlength=n_bus),
        bus_load=np.bincount(labels, weights=load, minlength=n_bus),
        branches=labels[nbg.line_busbars],
        reactance=nbg.reactance,
        limit=nbg.limit,
        components=components,
        bus_zone=np.asarray(nbg.spec.zone_of)[bus_sub],
    )


@dataclass
class StructuralReport:
    dangling_busbars: list[int] = field(default_factory=list)
    substations_over_split: list[tuple[int, int]] = field(default_factory=list)
    adjacent_open_pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not (self.dangling_busbars or self.substations_over_split or self.adjacent_open_pairs)

    @property
    def n_violations(self) -> int:
        return len(self.dangling_busbars) + len(self.substations_over_split) + len(self.adjacent_open_pairs)


def structural_check(nbg: NodeBreakerGraph, z) -> StructuralReport:
    """Dangling busbars, substations with > 2 components, adjacent open pairs.

    Two-busbar substations are exempt from the dangling rule: opening their
    only breaker is a legal split.
    """
    z = as_config(nbg, z)
    labels = busbar_components(nbg, z)
    rep = StructuralReport()
    for s, rids in enumerate(nbg.sub_breakers):
        if len(rids) < 2:
            continue
        ring = nbg.sub_busbars[s]
        k = len(rids)
        for p in range(k):
            # ring position p touches breakers p-1 and p
            if z[rids[p - 1]] == 0 and z[rids[p]] == 0:
                rep.dangling_busbars.append(ring[p])
                a, b = sorted((rids[p - 1], rids[p]))
                rep.adjacent_open_pairs.append((a, b))
        ncomp = len(set(labels[ring].tolist()))
        if ncomp > 2:
            rep.substations_over_split.append((s, ncomp))
    rep.dangling_busbars.sort()
    rep.adjacent_open_pairs.sort()
    return rep


def zone_injections(nbg: NodeBreakerGraph, inst: Instance, lam: float, mu: float) -> tuple[np.ndarray, np.ndarray]:
    """Busbar (P^G, P^D): Zone-1 generation scaled by lam, Zone-2 load by mu."""
    z1 = nbg.busbar_zone == 1
    pg = np.where(z1, lam * inst.gen, inst.gen)
    pd = np.where(z1, inst.load, mu * inst.load)
    return pg, pd


# ---------------------------------------------------------------------------
# line graph


@dataclass
class LineGraph:
    x: np.ndarray  # (L, 4) [X, Fmax, inj(C_i), inj(C_j)]
    edge_index: np.ndarray  # (E, 2) directed (src line, dst line), both directions present
    edge_attr: np.ndarray  # (E, 2) [sum of shared injections, max shared split flag]

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_index.shape[0]


def line_graph_from_buses(branches: np.ndarray, bus_inj: np.ndarray, bus_split: np.ndarray,
                          reactance: np.ndarray, limit: np.ndarray) -> LineGraph:
    L = branches.shape[0]
    x = np.column_stack([reactance, limit, bus_inj[branches[:, 0]], bus_inj[branches[:, 1]]])
    by_bus: dict[int, list[int]] = {}
    for l, (a, b) in enumerate(branches):
        by_bus.setdefault(int(a), []).append(l)
        if b != a:
            by_bus.setdefault(int(b), []).append(l)
    shared: dict[tuple[int, int], list[int]] = {}
    for bus in sorted(by_bus):
        ls = by_bus[bus]
        for i in range(len(ls)):
            for j in range(i + 1, len(ls)):
                shared.setdefault((ls[i], ls[j]), []).append(bus)
    src, dst, attr = [], [], []
    for (a, b), buses in sorted(shared.items()):
        e = [float(sum(bus_inj[s] for s in buses)), float(max(bus_split[s] for s in buses))]
        src += [a, b]
        dst += [b, a]
        attr += [e, e]
    edge_index = np.array([src, dst], dtype=int).T.reshape(-1, 2)
    edge_attr = np.array(attr, dtype=float).reshape(-1, 2)
    assert x.shape == (L, 4)
    return LineGraph(x, edge_index, edge_attr)


def build_line_graph(bbg: BusBranchGraph, nbg: NodeBreakerGraph, inst: Instance, lam: float, mu: float,
                     busbar_injection: np.ndarray | None = None) -> LineGraph:
    """One node per line; lines sharing a bus-branch bus are joined.

    Injections default to the zone-scaled busbar values; pass
    ``busbar_injection`` (P^G - P^D per busbar) to override.
    """
    if busbar_injection is None:
        pg, pd = zone_injections(nbg, inst, lam, mu)
        busbar_injection = pg - pd
    bus_inj = bbg.bus_injection(busbar_injection)
    bus_split = bbg.split[bbg.bus_sub].astype(float)
    return line_graph_from_buses(bbg.branches, bus_inj, bus_split, bbg.reactance, bbg.limit)


# ---------------------------------------------------------------------------
# heterogeneous busbar graph


@dataclass
class HeteroGraph:
    x: np.ndarray  # (B, 4) [P^G, P^D, deg_line, deg_total]
    br_index: np.ndarray  # (R, 2)
    br_attr: np.ndarray  # (R, 3) [z, conn_L, conn_R]
    line_index: np.ndarray  # (L, 2)
    line_attr: np.ndarray  # (L, 2) [X, Fmax]

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


def build_hetero_graph(nbg: NodeBreakerGraph, z_init, inst: Instance) -> HeteroGraph:
    z = as_config(nbg, z_init)
    n = nbg.n_busbars
    deg_line = np.bincount(nbg.line_busbars.ravel(), minlength=n).astype(float)
    deg_br = np.bincount(nbg.breakers.ravel(), minlength=n).astype(float)
    closed_at = np.bincount(nbg.breakers.ravel(), weights=np.repeat(z, 2), minlength=n)
    i, j = nbg.breakers[:, 0], nbg.breakers[:, 1]
    conn_l = closed_at[i] - z + deg_line[i]
    conn_r = closed_at[j] - z + deg_line[j]
    x = np.column_stack([inst.gen, inst.load, deg_line, deg_line + deg_br])
    br_attr = np.column_stack([z.astype(float), conn_l, conn_r])
    line_attr = np.column_stack([nbg.reactance, nbg.limit])
    return HeteroGraph(x, nbg.breakers.copy(), br_attr, nbg.line_busbars.copy(), line_attr)


# ---------------------------------------------------------------------------
# structurally feasible configurations


def substation_options(nbg: NodeBreakerGraph, s: int) -> list[tuple[int, ...]]:
    """Breaker sets that may be open in substation ``s``; ``()`` is unsplit.

    One breaker for two-busbar substations, otherwise two non-adjacent ring
    breakers (which always yields exactly two components).
    """
    rids = nbg.sub_breakers[s]
    opts: list[tuple[int, ...]] = [()]
    if len(rids) == 1:
        opts.append((rids[0],))
        return opts
    k = len(rids)
    for a in range(k):
        for b in range(a + 2, k):
            if a == 0 and b == k - 1:
                continue
            opts.append((rids[a], rids[b]))
    return opts


def config_from_choices(nbg: NodeBreakerGraph, open_sets) -> np.ndarray:
    z = np.ones(nbg.n_breakers, dtype=int)
    for opened in open_sets:
        z[list(opened)] = 0
    return z


def random_feasible_config(nbg: NodeBreakerGraph, rng, split_prob: float = 0.3) -> np.ndarray:
    """Random structurally feasible config; each substation splits w.p. ``split_prob``."""
    choices = []
    for s in range(nbg.n_substations):
        opts = substation_options(nbg, s)
        if len(opts) > 1 and rng.random() < split_prob:
            choices.append(opts[1 + rng.integers(len(opts) - 1)])
    return config_from_choices(nbg, choices)

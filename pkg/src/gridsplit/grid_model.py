"""Synthetic two-zone node-breaker grids and perturbed injection instances.

Zone 1 is generation-dominant, Zone 2 load-dominant; the zones are joined by
a few tie adjacencies. Every adjacency between substations is a pair of
parallel lines. Substations with two neighbours hold two busbars and one
breaker; larger substations are rings of ``2|N(s)|`` busbars and breakers with
alternating generation/load roles.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import networkx as nx
import numpy as np

from .numerics import solve_linear

BASE_MVA = 100.0
GEN, LOAD = "gen", "load"


@dataclass(frozen=True)
class GridParams:
    n_substations: int
    degree_min: int = 2
    degree_max: int = 4
    n_breakers: int | None = None
    zone1_fraction: float = 0.5
    tie_pairs: int = 2
    zone1_gen_mw: tuple[float, float] = (100.0, 400.0)
    zone1_load_mw: tuple[float, float] = (5.0, 40.0)
    zone2_gen_mw: tuple[float, float] = (5.0, 40.0)
    zone2_load_mw: tuple[float, float] = (100.0, 400.0)
    reactance_pu: tuple[float, float] = (0.01, 0.1)
    export_headroom: float = 0.05
    # thermal limits: margin * max(|flow at lambda=0|, |flow at calibration_lambda|)
    calibration_lambda: float = 0.6
    limit_margin: tuple[float, float] = (1.0, 3.0)
    limit_floor_fraction: float = 0.25


# Network sizes of the benchmark suite (breakers, substations, neighbour range).
PRESETS: dict[str, GridParams] = {
    "tiny": GridParams(6, 2, 2, n_breakers=6),
    "desk50": GridParams(12, 2, 4, n_breakers=50),
    "b100": GridParams(20, 2, 5, n_breakers=100),
    "b500": GridParams(100, 2, 6, n_breakers=500),
    "b1000": GridParams(200, 2, 7, n_breakers=1000),
}


@dataclass
class Line:
    from_sub: int
    to_sub: int
    reactance: float
    limit: float
    pair: int


@dataclass
class GridSpec:
    n_substations: int
    zone_of: list[int]
    neighbors: list[list[int]]
    base_gen: list[float]
    base_load: list[float]
    lines: list[Line]
    seed: int
    export_headroom: float = 0.05

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def n_breakers(self) -> int:
        return sum(1 if len(nb) == 2 else 2 * len(nb) for nb in self.neighbors)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        d["lines"] = [Line(**ln) for ln in d["lines"]]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class NodeBreakerGraph:
    spec: GridSpec
    busbar_sub: np.ndarray
    busbar_role: list[str]
    breakers: np.ndarray  # (R, 2) busbar endpoints
    breaker_sub: np.ndarray
    line_busbars: np.ndarray  # (L, 2) busbar at from/to end
    gen_share: np.ndarray
    load_share: np.ndarray
    sub_busbars: list[list[int]]  # ring order
    sub_breakers: list[list[int]]  # breaker k joins ring positions k and k+1

    @property
    def n_busbars(self) -> int:
        return self.busbar_sub.size

    @property
    def n_breakers(self) -> int:
        return self.breakers.shape[0]

    @property
    def n_lines(self) -> int:
        return self.line_busbars.shape[0]

    @property
    def n_substations(self) -> int:
        return self.spec.n_substations

    @property
    def reactance(self) -> np.ndarray:
        return np.array([ln.reactance for ln in self.spec.lines])

    @property
    def limit(self) -> np.ndarray:
        return np.array([ln.limit for ln in self.spec.lines])

    @property
    def line_subs(self) -> np.ndarray:
        return np.array([(ln.from_sub, ln.to_sub) for ln in self.spec.lines], dtype=int).reshape(-1, 2)

    @property
    def busbar_zone(self) -> np.ndarray:
        return np.asarray(self.spec.zone_of)[self.busbar_sub]

    def busbar_breakers(self) -> list[list[int]]:
        inc = [[] for _ in range(self.n_busbars)]
        for r, (i, j) in enumerate(self.breakers):
            inc[i].append(r)
            inc[j].append(r)
        return inc

    def busbar_lines(self) -> list[list[int]]:
        inc = [[] for _ in range(self.n_busbars)]
        for l, (i, j) in enumerate(self.line_busbars):
            inc[i].append(l)
            inc[j].append(l)
        return inc

    def all_closed(self) -> np.ndarray:
        return np.ones(self.n_breakers, dtype=int)


@dataclass
class Instance:
    gen: np.ndarray  # per busbar base generation capacity, MW
    load: np.ndarray  # per busbar base load, MW
    alpha: float
    beta: float
    sub_gen: np.ndarray
    sub_load: np.ndarray
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "gen": self.gen.tolist(),
            "load": self.load.tolist(),
            "alpha": self.alpha,
            "beta": self.beta,
            "sub_gen": self.sub_gen.tolist(),
            "sub_load": self.sub_load.tolist(),
            "seed": self.seed,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        return cls(
            gen=np.asarray(d["gen"], dtype=float),
            load=np.asarray(d["load"], dtype=float),
            alpha=float(d["alpha"]),
            beta=float(d["beta"]),
            sub_gen=np.asarray(d["sub_gen"], dtype=float),
            sub_load=np.asarray(d["sub_load"], dtype=float),
            seed=d.get("seed"),
            meta=dict(d.get("meta", {})),
        )


def alpha_beta(gen_z1: float, load_z1: float, gen_z2: float, load_z2: float) -> tuple[float, float]:
    """Zone-1 gen to Zone-2 load ratio and the normalised balance offset."""
    if load_z2 <= 0:
        raise ValueError("Zone 2 must carry positive load")
    return gen_z1 / load_z2, (gen_z2 - load_z1) / load_z2


# ---------------------------------------------------------------------------
# grid generation


def _sample_degrees(rng, n, lo, hi, n_breakers):
    if n_breakers is None:
        deg = rng.integers(lo, hi + 1, size=n)
        if deg.sum() % 2:
            idx = rng.permutation(n)
            for k in idx:
                if deg[k] + 1 <= hi:
                    deg[k] += 1
                    break
                if deg[k] - 1 >= lo:
                    deg[k] -= 1
                    break
        return deg
    big_lo = max(3, lo)
    options = []
    for a in range(n + 1):
        if a and lo > 2:
            break
        m = n - a
        if (n_breakers - a) % 2:
            continue
        D = (n_breakers - a) // 2
        if m == 0:
            if D == 0:
                options.append((a, D))
            continue
        if hi < 3 or not (m * big_lo <= D <= m * hi):
            continue
        if D % 2:  # degree sum 2a + D must be even
            continue
        options.append((a, D))
    if not options:
        raise ValueError(f"no degree sequence of {n} substations in [{lo}, {hi}] gives {n_breakers} breakers")
    a, D = options[rng.integers(len(options))]
    big = np.full(n - a, big_lo)
    extra = D - big.sum()
    while extra > 0:
        room = np.nonzero(big < hi)[0]
        big[room[rng.integers(room.size)]] += 1
        extra -= 1
    deg = np.concatenate([np.full(a, 2), big])
    return deg[rng.permutation(n)]


def _connect_by_swaps(G: nx.Graph, rng) -> bool:
    """Join components with degree-preserving double-edge swaps."""
    while not nx.is_connected(G):
        comps = sorted((sorted(c) for c in nx.connected_components(G)), key=lambda c: c[0])
        bridges = set(nx.bridges(G))
        cyc = None
        for ci, comp in enumerate(comps):
            sub = G.subgraph(comp)
            cand = sorted(
                tuple(sorted(e)) for e in sub.edges()
                if e not in bridges and (e[1], e[0]) not in bridges
            )
            if cand:
                cyc = (ci, cand[rng.integers(len(cand))])
                break
        if cyc is None:
            return False
        ci, (a, b) = cyc
        other = comps[(ci + 1) % len(comps)]
        oedges = sorted(tuple(sorted(e)) for e in G.subgraph(other).edges())
        if not oedges:
            return False
        c, d = oedges[rng.integers(len(oedges))]
        G.remove_edge(a, b)
        G.remove_edge(c, d)
        G.add_edge(a, c)
        G.add_edge(b, d)
    return True


def _realize_zone(intra_deg, rng) -> nx.Graph | None:
    n = len(intra_deg)
    if n == 1:
        return nx.empty_graph(1) if intra_deg[0] == 0 else None
    if min(intra_deg) < 1 or sum(intra_deg) < 2 * (n - 1) or not nx.is_graphical(list(intra_deg)):
        return None
    G = nx.havel_hakimi_graph(list(intra_deg))
    if G.number_of_edges() >= 2 and n >= 4:
        try:
            nx.double_edge_swap(G, nswap=4 * G.number_of_edges(), max_tries=400 * G.number_of_edges(),
                                seed=int(rng.integers(2**31)))
        except nx.NetworkXAlgorithmError:
            pass
    if not _connect_by_swaps(G, rng):
        return None
    return G


def _dc_flows_substation(n, lines, injection_mw):
    """All-closed DC flows (one bus per substation), reference bus 0."""
    B = np.zeros((n, n))
    for ln in lines:
        b = BASE_MVA / ln.reactance
        i, j = ln.from_sub, ln.to_sub
        B[i, i] += b
        B[j, j] += b
        B[i, j] -= b
        B[j, i] -= b
    theta = np.zeros(n)
    theta[1:] = solve_linear(B[1:, 1:], injection_mw[1:])
    return np.array([BASE_MVA * (theta[ln.from_sub] - theta[ln.to_sub]) / ln.reactance for ln in lines])


def _rebalanced_zone2_load(zone, gen, load, headroom):
    return (1.0 + headroom) * gen.sum() - load[zone == 1].sum()


def generate_grid(params: GridParams, seed: int, max_attempts: int = 500) -> GridSpec:
    """Sample a two-zone grid. Deterministic for a fixed ``seed``."""
    n = params.n_substations
    lo, hi = params.degree_min, params.degree_max
    if not (2 <= lo <= hi <= 7):
        raise ValueError(f"neighbour range [{lo}, {hi}] must lie within [2, 7]")
    if n < 4:
        raise ValueError("need at least 4 substations")
    n1 = int(round(n * params.zone1_fraction))
    n2 = n - n1
    if n1 < 1 or n2 < 1:
        raise ValueError("both zones must be non-empty")
    if params.tie_pairs < 1 or params.tie_pairs > n1 * n2:
        raise ValueError("tie_pairs must be between 1 and |Z1|*|Z2|")
    if hi > n - 1:
        raise ValueError(f"degree {hi} impossible with {n} substations")
    rng = np.random.default_rng(seed)

    G = None
    for _ in range(max_attempts):
        deg = _sample_degrees(rng, n, lo, hi, params.n_breakers)
        zone = np.array([1] * n1 + [2] * n2)
        z1 = np.arange(n1)
        z2 = np.arange(n1, n)
        ties = set()
        while len(ties) < params.tie_pairs:
            ties.add((int(rng.choice(z1)), int(rng.choice(z2))))
        ties = sorted(ties)
        intra = deg.copy()
        for u, v in ties:
            intra[u] -= 1
            intra[v] -= 1
        if intra.min() < 0:
            continue
        G1 = _realize_zone(intra[:n1], rng)
        if G1 is None:
            continue
        G2 = _realize_zone(intra[n1:], rng)
        if G2 is None:
            continue
        G = nx.Graph()
        G.add_nodes_from(range(n))
        G.add_edges_from(G1.edges())
        G.add_edges_from((a + n1, b + n1) for a, b in G2.edges())
        G.add_edges_from(ties)
        if any(d != deg[k] for k, d in G.degree()):
            G = None
            continue
        break
    if G is None:
        raise ValueError(
            f"could not realise connected zones for {n} substations with degrees in [{lo}, {hi}]"
        )

    zone_of = [1] * n1 + [2] * n2
    neighbors = [sorted(G.neighbors(s)) for s in range(n)]
    zone = np.asarray(zone_of)

    def logu(rng_, bounds, size):
        a, b = np.log(bounds[0]), np.log(bounds[1])
        return np.exp(rng_.uniform(a, b, size))

    gen = np.where(zone == 1, logu(rng, params.zone1_gen_mw, n), logu(rng, params.zone2_gen_mw, n))
    load = np.where(zone == 1, logu(rng, params.zone1_load_mw, n), logu(rng, params.zone2_load_mw, n))
    target = _rebalanced_zone2_load(zone, gen, load, params.export_headroom)
    load[zone == 2] *= target / load[zone == 2].sum()

    lines = []
    for s, t in sorted(tuple(sorted(e)) for e in G.edges()):
        for pair in (0, 1):
            x = float(rng.uniform(*params.reactance_pu))
            lines.append(Line(s, t, x, 0.0, pair))

    # thermal limits: feasible all-closed flows at lambda in [0, calibration_lambda]
    alpha, beta = alpha_beta(gen[zone == 1].sum(), load[zone == 1].sum(),
                             gen[zone == 2].sum(), load[zone == 2].sum())

    def injection(lam):
        mu = alpha * lam + beta
        return np.where(zone == 1, lam * gen - load, gen - mu * load)

    f0 = _dc_flows_substation(n, lines, injection(max(0.0, -beta / alpha)))
    fc = _dc_flows_substation(n, lines, injection(params.calibration_lambda))
    need = np.maximum(np.abs(f0), np.abs(fc))
    floor = params.limit_floor_fraction * np.abs(fc).mean()
    margins = rng.uniform(*params.limit_margin, size=len(lines))
    for ln, req, m in zip(lines, need, margins):
        ln.limit = float(max(req * m, floor))

    return GridSpec(
        n_substations=n,
        zone_of=zone_of,
        neighbors=neighbors,
        base_gen=[float(v) for v in gen],
        base_load=[float(v) for v in load],
        lines=lines,
        seed=int(seed),
        export_headroom=params.export_headroom,
    )


def build_node_breaker(spec: GridSpec) -> NodeBreakerGraph:
    """Expand substations into busbars and breakers.

    Ring substations alternate gen/load roles (even ring positions are gen).
    The two parallel lines to the ``j``-th neighbour attach to ring positions
    ``2j`` (pair 0) and ``2j + 1`` (pair 1); in a two-busbar substation pair 0
    lands on the gen busbar and pair 1 on the load busbar.
    """
    busbar_sub, roles = [], []
    breakers, breaker_sub = [], []
    gen_share, load_share = [], []
    sub_busbars, sub_breakers = [], []
    for s, nb in enumerate(spec.neighbors):
        k = len(nb)
        nbus = 2 if k == 2 else 2 * k
        first = len(busbar_sub)
        ids = list(range(first, first + nbus))
        for p in range(nbus):
            busbar_sub.append(s)
            roles.append(GEN if p % 2 == 0 else LOAD)
            gen_share.append(2.0 / nbus if p % 2 == 0 else 0.0)
            load_share.append(2.0 / nbus if p % 2 == 1 else 0.0)
        rids = []
        if nbus == 2:
            rids.append(len(breakers))
            breakers.append((ids[0], ids[1]))
            breaker_sub.append(s)
        else:
            for p in range(nbus):
                rids.append(len(breakers))
                breakers.append((ids[p], ids[(p + 1) % nbus]))
                breaker_sub.append(s)
        sub_busbars.append(ids)
        sub_breakers.append(rids)

    def attach(s, other, pair):
        j = spec.neighbors[s].index(other)
        k = len(spec.neighbors[s])
        pos = pair if k == 2 else 2 * j + pair
        return sub_busbars[s][pos]

    line_busbars = [(attach(ln.from_sub, ln.to_sub, ln.pair), attach(ln.to_sub, ln.from_sub, ln.pair))
                    for ln in spec.lines]
    return NodeBreakerGraph(
        spec=spec,
        busbar_sub=np.asarray(busbar_sub, dtype=int),
        busbar_role=roles,
        breakers=np.asarray(breakers, dtype=int).reshape(-1, 2),
        breaker_sub=np.asarray(breaker_sub, dtype=int),
        line_busbars=np.asarray(line_busbars, dtype=int).reshape(-1, 2),
        gen_share=np.asarray(gen_share),
        load_share=np.asarray(load_share),
        sub_busbars=sub_busbars,
        sub_breakers=sub_breakers,
    )


def make_instance(nbg: NodeBreakerGraph, sub_gen, sub_load, seed=None) -> Instance:
    sub_gen = np.asarray(sub_gen, dtype=float)
    sub_load = np.asarray(sub_load, dtype=float)
    zone = np.asarray(nbg.spec.zone_of)
    gen = sub_gen[nbg.busbar_sub] * nbg.gen_share
    load = sub_load[nbg.busbar_sub] * nbg.load_share
    alpha, beta = alpha_beta(sub_gen[zone == 1].sum(), sub_load[zone == 1].sum(),
                             sub_gen[zone == 2].sum(), sub_load[zone == 2].sum())
    return Instance(gen, load, alpha, beta, sub_gen, sub_load, seed)


def base_instance(nbg: NodeBreakerGraph) -> Instance:
    return make_instance(nbg, nbg.spec.base_gen, nbg.spec.base_load)


def _fit_scale(values, lower, upper, target, iters=200):
    """Find c with sum(clip(c * values, lower, upper)) == target (bisection)."""
    lo_sum, hi_sum = lower.sum(), upper.sum()
    if target <= lo_sum:
        return lower.copy()
    if target >= hi_sum:
        return upper.copy()
    a, b = 0.0, 1.0
    while np.clip(b * values, lower, upper).sum() < target:
        b *= 2.0
    for _ in range(iters):
        c = 0.5 * (a + b)
        if np.clip(c * values, lower, upper).sum() < target:
            a = c
        else:
            b = c
    out = np.clip(b * values, lower, upper)
    # absorb the residual rounding error in the unclipped entries
    free = (out > lower) & (out < upper)
    if free.any():
        out[free] += (target - out.sum()) * out[free] / out[free].sum()
    return out


def perturb_instance(nbg: NodeBreakerGraph, seed: int, width: float = 0.2) -> Instance:
    """Scale each substation's generation and load by factors in [1-w, 1+w].

    Zone-2 loads are then rescaled (and kept inside their +-w band) so total
    load equals total generation times ``1 + export_headroom``.
    """
    spec = nbg.spec
    rng = np.random.default_rng(seed)
    zone = np.asarray(spec.zone_of)
    base_gen = np.asarray(spec.base_gen)
    base_load = np.asarray(spec.base_load)
    if width == 0.0:
        inst = make_instance(nbg, base_gen, base_load, seed)
        return inst
    fg = rng.uniform(1 - width, 1 + width, size=base_gen.size)
    fl = rng.uniform(1 - width, 1 + width, size=base_load.size)
    gen = base_gen * fg
    load = base_load * fl
    z2 = zone == 2
    target = _rebalanced_zone2_load(zone, gen, load, spec.export_headroom)
    load[z2] = _fit_scale(load[z2], (1 - width) * base_load[z2], (1 + width) * base_load[z2], target)
    return make_instance(nbg, gen, load, seed)


def grid_summary(spec: GridSpec) -> dict:
    deg = [len(nb) for nb in spec.neighbors]
    return {
        "substations": spec.n_substations,
        "breakers": spec.n_breakers(),
        "lines": spec.n_lines,
        "busbars": sum(max(2, 2 * d) if d > 2 else 2 for d in deg),
        "degree_range": [min(deg), max(deg)],
        "tie_lines": sum(1 for ln in spec.lines if spec.zone_of[ln.from_sub] != spec.zone_of[ln.to_sub]),
    }


def with_limits(spec: GridSpec, limits) -> GridSpec:
    """Copy of ``spec`` with new thermal limits (used by sensitivity checks)."""
    lines = [replace(ln, limit=float(v)) for ln, v in zip(spec.lines, limits)]
    return replace(spec, lines=lines)

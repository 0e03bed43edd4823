"""Optimal breaker configurations: branch-and-bound, brute force, local search.

The mixed-integer model couples breaker status to flows and angles with
big-M rows. Branch-and-bound explores the LP relaxation best-first; every
integral point is re-scored with the exact fixed-topology DCOPF so reported
values never depend on the relaxation.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .dcopf import DcopfLayout, common_rows, solve_dcopf
from .grid_model import BASE_MVA, Instance, NodeBreakerGraph
from .numerics import LpProblem, solve_lp
from .topo import config_from_choices, structural_check, substation_options

log = logging.getLogger(__name__)

INT_TOL = 1e-6
OPT_TOL = 1e-6


class TooLarge(ValueError):
    pass


@dataclass
class SolverConfig:
    big_m_angle: float | None = None  # default: default_angle_m
    big_m_flow: float | None = None  # default: per-substation line limits + injections
    time_limit: float = 600.0
    node_limit: int = 200_000
    heuristic_budget: int = 5_000  # DCOPF evaluations
    lp_method: str = "highs"
    warm_start: bool = True  # seed the incumbent with heuristic_search

    def __post_init__(self):
        if self.time_limit <= 0 or self.node_limit <= 0 or self.heuristic_budget < 0:
            raise ValueError("solver limits must be positive")
        for m in (self.big_m_angle, self.big_m_flow):
            if m is not None and m <= 0:
                raise ValueError("big-M constants must be positive")


@dataclass
class MipResult:
    z: np.ndarray
    lam: float
    status: str  # optimal | timeout | infeasible
    node_count: int = 0
    wall_time: float = 0.0
    method: str = ""
    mu: float = float("nan")
    line_flow: np.ndarray = field(default_factory=lambda: np.zeros(0))
    root_bound: float = float("nan")
    history: list[float] = field(default_factory=list)
    best_bound: float = float("nan")  # proven upper bound on lambda*

    def to_label(self) -> dict:
        return {
            "z": [int(v) for v in self.z],
            "lambda": self.lam,
            "mu": self.mu,
            "line_flow": [float(v) for v in self.line_flow],
            "solver": {
                "method": self.method,
                "status": self.status,
                "node_count": self.node_count,
                "wall_time": self.wall_time,
                "root_bound": self.root_bound,
                "best_bound": self.best_bound,
            },
        }


def _finish(nbg, inst, z, status, method, t0, nodes=0, root_bound=float("nan"), history=None,
            bound=None) -> MipResult:
    sol = solve_dcopf(nbg, z, inst, check=False)
    lam = sol.lam if sol.feasible else float("nan")
    if bound is None:
        bound = lam if status == "optimal" else float("nan")
    return MipResult(
        z=np.asarray(z, dtype=int), lam=lam, status=status,
        node_count=nodes, wall_time=time.perf_counter() - t0, method=method, mu=sol.mu,
        line_flow=sol.line_flow, root_bound=root_bound, history=list(history or []), best_bound=bound,
    )


def evaluate(nbg: NodeBreakerGraph, inst: Instance, z) -> float:
    """Exact lambda of a configuration, -inf when infeasible in any way."""
    if not structural_check(nbg, z).feasible:
        return -np.inf
    sol = solve_dcopf(nbg, z, inst, check=False)
    return sol.lam if sol.feasible else -np.inf


# ---------------------------------------------------------------------------
# brute force


def brute_force_enum(nbg: NodeBreakerGraph, inst: Instance, max_breakers: int = 16) -> MipResult:
    """Try all 2^|R| configurations; ties go to the lexicographically first z."""
    R = nbg.n_breakers
    if R > max_breakers:
        raise TooLarge(f"{R} breakers exceed the brute-force limit of {max_breakers}")
    t0 = time.perf_counter()
    best_lam, best_z = -np.inf, None
    for bits in itertools.product((0, 1), repeat=R):
        z = np.array(bits, dtype=int)
        lam = evaluate(nbg, inst, z)
        if lam > best_lam + OPT_TOL:
            best_lam, best_z = lam, z
    if best_z is None:
        return MipResult(nbg.all_closed(), float("nan"), "infeasible", 2**R, time.perf_counter() - t0, "bruteforce")
    return _finish(nbg, inst, best_z, "optimal", "bruteforce", t0, nodes=2**R)


# ---------------------------------------------------------------------------
# local search


def heuristic_search(nbg: NodeBreakerGraph, inst: Instance, cfg: SolverConfig | None = None) -> MipResult:
    """Best-improvement local search over single-substation split moves.

    Starts all-closed. A move sets one substation to any of its legal states
    (unsplit, or one legal split). Stops at a local optimum or when the
    evaluation budget runs out, in which case the best move seen so far in
    the current sweep is taken (first-improvement fallback).
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    choice: dict[int, tuple[int, ...]] = {}
    best = evaluate(nbg, inst, nbg.all_closed())
    history = [best]
    budget = cfg.heuristic_budget
    options = [substation_options(nbg, s) for s in range(nbg.n_substations)]
    while budget > 0:
        move = None
        move_lam = best
        for s, opts in enumerate(options):
            for o in opts:
                if choice.get(s, ()) == o:
                    continue
                if budget <= 0:
                    break
                trial = dict(choice)
                trial[s] = o
                lam = evaluate(nbg, inst, config_from_choices(nbg, trial.values()))
                budget -= 1
                if lam > move_lam + OPT_TOL:
                    move, move_lam = trial, lam
        if move is None:
            break
        choice, best = move, move_lam
        history.append(best)
    z = config_from_choices(nbg, choice.values())
    if not np.isfinite(best):
        return MipResult(z, float("nan"), "infeasible", 0, time.perf_counter() - t0, "heuristic", history=history)
    # "optimal" here means locally optimal, so no bound is claimed
    return _finish(nbg, inst, z, "optimal", "heuristic", t0, nodes=cfg.heuristic_budget - budget, history=history,
                   bound=float("nan"))


# ---------------------------------------------------------------------------
# mixed-integer model


@dataclass
class MipModel:
    lp: LpProblem
    z_cols: np.ndarray
    layout: DcopfLayout


def default_flow_m(nbg: NodeBreakerGraph, inst: Instance) -> np.ndarray:
    """Per-breaker flow bound: limits of the substation's lines plus its injections.

    With one breaker of a closed ring carrying zero circulation, every
    breaker flow is a partial sum of busbar residuals, each bounded by the
    attached line limit and injection.
    """
    per_sub = np.zeros(nbg.n_substations)
    lim = nbg.limit
    for l, (a, b) in enumerate(nbg.line_subs):
        per_sub[a] += lim[l]
        per_sub[b] += lim[l]
    per_sub += inst.sub_gen + inst.sub_load
    return per_sub[nbg.breaker_sub]


def default_angle_m(nbg: NodeBreakerGraph) -> float:
    """Angle bound for open-breaker rows.

    Within an island, two busbars differ by at most the sum over a simple
    path of F*X/100, hence by at most S = sum over all lines. Islands can be
    shifted independently, so every solution has a representative whose
    angles sit in one window of width S around the reference. When S fits
    in [-pi, pi] it replaces the trivial 2*pi.
    """
    s = float((nbg.limit * nbg.reactance).sum() / BASE_MVA)
    return s if s <= np.pi else 2 * np.pi


def build_mip(nbg: NodeBreakerGraph, inst: Instance, cfg: SolverConfig | None = None) -> MipModel:
    cfg = cfg or SolverConfig()
    lay = DcopfLayout(nbg.n_busbars, nbg.n_lines, nbg.n_breakers)
    R = nbg.n_breakers
    n = lay.n_vars + R
    z0 = lay.n_vars
    A_eq, b_eq, lb, ub = common_rows(nbg, inst, lay, n)
    ref = np.zeros(n)
    ref[lay.theta.start] = 1.0
    A_eq = np.vstack([A_eq, ref])
    b_eq = np.append(b_eq, 0.0)
    lb[z0:] = 0.0
    ub[z0:] = 1.0
    m_ang = cfg.big_m_angle if cfg.big_m_angle is not None else default_angle_m(nbg)
    m_flow = np.full(R, cfg.big_m_flow) if cfg.big_m_flow is not None else default_flow_m(nbg, inst)
    th0, br0 = lay.theta.start, lay.breaker.start
    rows, rhs = [], []
    for r, (i, j) in enumerate(nbg.breakers):
        for sgn in (1.0, -1.0):
            row = np.zeros(n)  # sgn * f_r <= M z_r
            row[br0 + r] = sgn
            row[z0 + r] = -m_flow[r]
            rows.append(row)
            rhs.append(0.0)
            row = np.zeros(n)  # sgn * (theta_i - theta_j) <= M (1 - z_r)
            row[th0 + i] = sgn
            row[th0 + j] = -sgn
            row[z0 + r] = m_ang
            rows.append(row)
            rhs.append(m_ang)
    for s, rids in enumerate(nbg.sub_breakers):
        if len(rids) < 2:
            continue
        for p in range(len(rids)):
            row = np.zeros(n)  # no dangling busbar: z_{p-1} + z_p >= 1
            row[z0 + rids[p - 1]] = -1.0
            row[z0 + rids[p]] = -1.0
            rows.append(row)
            rhs.append(-1.0)
        if len(rids) > 2:
            row = np.zeros(n)  # at most two open breakers
            row[z0 + np.asarray(rids)] = -1.0
            rows.append(row)
            rhs.append(-(len(rids) - 2.0))
    c = np.zeros(n)
    c[lay.lam] = 1.0
    names = lay.names() + [f"z_{r}" for r in range(R)]
    lp = LpProblem(c=c, A_ub=np.array(rows), b_ub=np.array(rhs), A_eq=A_eq, b_eq=b_eq,
                   lb=lb, ub=ub, sense="max", var_names=names)
    return MipModel(lp, np.arange(z0, n), lay)


def _with_bounds(model: MipModel, zlo, zhi) -> LpProblem:
    p = model.lp
    lb = p.lb.copy()
    ub = p.ub.copy()
    lb[model.z_cols] = zlo
    ub[model.z_cols] = zhi
    return LpProblem(c=p.c, A_ub=p.A_ub, b_ub=p.b_ub, A_eq=p.A_eq, b_eq=p.b_eq, lb=lb, ub=ub,
                     sense=p.sense, var_names=p.var_names)


def _most_fractional(zv: np.ndarray) -> int | None:
    frac = np.abs(zv - np.round(zv))
    if frac.max() <= INT_TOL:
        return None
    dist = np.abs(zv - 0.5)
    # closest to 0.5, ties by lowest index
    return int(np.flatnonzero(dist <= dist.min() + 1e-12)[0])


def solve_mip_bnb(nbg: NodeBreakerGraph, inst: Instance, cfg: SolverConfig | None = None) -> MipResult:
    """Best-first branch-and-bound on breaker status."""
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    model = build_mip(nbg, inst, cfg)
    R = nbg.n_breakers
    inc_z = nbg.all_closed()
    inc_lam = evaluate(nbg, inst, inc_z)
    if cfg.warm_start and cfg.heuristic_budget > 0:
        h = heuristic_search(nbg, inst, cfg)
        if np.isfinite(h.lam) and h.lam > inc_lam + OPT_TOL:
            inc_z, inc_lam = h.z, h.lam
    history = [inc_lam]

    def relax(zlo, zhi):
        sol = solve_lp(_with_bounds(model, zlo, zhi), method=cfg.lp_method)
        if not sol.optimal:
            return None
        return sol.objective, sol.x[model.z_cols]

    def offer(zv):
        nonlocal inc_z, inc_lam
        z = (zv > 0.5).astype(int)
        lam = evaluate(nbg, inst, z)
        if lam > inc_lam + OPT_TOL:
            inc_z, inc_lam = z, lam
            history.append(lam)

    nodes = 0
    counter = itertools.count()
    root = relax(np.zeros(R), np.ones(R))
    if root is None:
        return _finish(nbg, inst, inc_z, "infeasible" if not np.isfinite(inc_lam) else "optimal",
                       "bnb", t0, nodes=1)
    root_bound = root[0]
    heap = [(-root[0], next(counter), np.zeros(R), np.ones(R), root[1])]
    status = "optimal"

    def dive(zlo, zhi, zv):
        zlo, zhi = zlo.copy(), zhi.copy()
        for _ in range(R):
            k = _most_fractional(zv)
            if k is None:
                offer(zv)
                return
            v = float(round(zv[k]))
            zlo[k] = zhi[k] = v
            res = relax(zlo, zhi)
            if res is None or res[0] <= inc_lam + OPT_TOL:
                return
            zv = res[1]

    dive(np.zeros(R), np.ones(R), root[1])
    while heap:
        if time.perf_counter() - t0 > cfg.time_limit or nodes >= cfg.node_limit:
            status = "timeout"
            break
        negb, _, zlo, zhi, zv = heapq.heappop(heap)
        if -negb <= inc_lam + OPT_TOL:
            heap.clear()
            break
        nodes += 1
        k = _most_fractional(zv)
        if k is None:
            offer(zv)
            continue
        offer(zv)
        for v in (1.0, 0.0):
            clo, chi = zlo.copy(), zhi.copy()
            clo[k] = chi[k] = v
            res = relax(clo, chi)
            if res is None or res[0] <= inc_lam + OPT_TOL:
                continue
            heapq.heappush(heap, (-res[0], next(counter), clo, chi, res[1]))
        if nodes % 50 == 0 and heap:
            _, _, dlo, dhi, dzv = heap[0]
            dive(dlo, dhi, dzv)
    if not np.isfinite(inc_lam):
        return MipResult(inc_z, float("nan"), "infeasible", nodes, time.perf_counter() - t0, "bnb",
                         root_bound=root_bound)
    bound = max([inc_lam] + [-h[0] for h in heap]) if status == "timeout" else None
    return _finish(nbg, inst, inc_z, status, "bnb", t0, nodes=nodes, root_bound=root_bound, history=history,
                   bound=bound)


def solve_mip_highs(nbg: NodeBreakerGraph, inst: Instance, cfg: SolverConfig | None = None) -> MipResult:
    """Same big-M model handed to the HiGHS MIP solver (scipy.optimize.milp)."""
    from scipy.optimize import Bounds, LinearConstraint, milp

    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    model = build_mip(nbg, inst, cfg)
    p = model.lp
    integrality = np.zeros(p.n_vars)
    integrality[model.z_cols] = 1
    cons = [LinearConstraint(p.A_ub, -np.inf, p.b_ub), LinearConstraint(p.A_eq, p.b_eq, p.b_eq)]
    res = milp(-p.c, constraints=cons, integrality=integrality, bounds=Bounds(p.lb, p.ub),
               options={"time_limit": cfg.time_limit, "mip_rel_gap": 1e-9})
    if res.x is None:
        return _finish(nbg, inst, nbg.all_closed(), "infeasible", "mip-highs", t0)
    z = (res.x[model.z_cols] > 0.5).astype(int)
    status = "optimal" if res.status == 0 else "timeout"
    dual = getattr(res, "mip_dual_bound", None)
    bound = -float(dual) if status == "timeout" and dual is not None else None
    nodes = int(getattr(res, "mip_node_count", 0) or 0)
    out = _finish(nbg, inst, z, status, "mip-highs", t0, nodes=nodes, bound=bound)
    base = evaluate(nbg, inst, nbg.all_closed())
    if not np.isfinite(out.lam) or out.lam < base - OPT_TOL:
        return _finish(nbg, inst, nbg.all_closed(), status, "mip-highs", t0, nodes=nodes, bound=bound)
    return out

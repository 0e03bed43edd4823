"""DC optimal power flow for a fixed breaker configuration.

With ``z`` fixed, the export problem has one degree of freedom: every
injection is affine in lambda, so line flows are ``f0 + lambda * f1`` and the
optimum is the largest lambda that keeps every flow, lambda and mu inside
their bounds. :func:`solve_dcopf` uses that closed form; :func:`build_dcopf`
writes the same problem as a full LP over (lambda, mu, theta, f_line,
f_breaker) for cross-checking and export.

Sign conventions: a line flow is positive from its ``from`` busbar to its
``to`` busbar, a breaker flow is positive from its first busbar to its
second, and at every busbar ``P^G - P^D`` equals the net outflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid_model import BASE_MVA, Instance, NodeBreakerGraph
from .numerics import LpProblem, solve_linear, solve_lp
from .topo import BusBranchGraph, UnionFind, as_config, structural_check, to_bus_branch

BALANCE_TOL = 1e-9


class StructurallyInfeasible(ValueError):
    pass


class LpInfeasible(RuntimeError):
    pass


class UnbalancedIsland(ValueError):
    pass


@dataclass
class DcopfSolution:
    status: str
    lam: float = float("nan")
    mu: float = float("nan")
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    line_flow: np.ndarray = field(default_factory=lambda: np.zeros(0))
    breaker_flow: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def feasible(self) -> bool:
        return self.status == "optimal"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "lambda": self.lam,
            "mu": self.mu,
            "line_flow": self.line_flow.tolist(),
        }


def _laplacian(n: int, branches: np.ndarray, reactance: np.ndarray) -> np.ndarray:
    B = np.zeros((n, n))
    b = BASE_MVA / reactance
    a, c = branches[:, 0], branches[:, 1]
    np.add.at(B, (a, a), b)
    np.add.at(B, (c, c), b)
    np.add.at(B, (a, c), -b)
    np.add.at(B, (c, a), -b)
    return B


def _island_angles(n: int, branches, reactance, rhs: np.ndarray, islands: np.ndarray) -> np.ndarray:
    """Angles solving B theta = rhs with the lowest bus of each island at 0.

    ``rhs`` may be (n,) or (n, k).
    """
    B = _laplacian(n, branches, reactance)
    theta = np.zeros(rhs.shape)
    for isl in np.unique(islands):
        buses = np.nonzero(islands == isl)[0]
        if buses.size == 1:
            continue
        rest = buses[1:]
        theta[rest] = solve_linear(B[np.ix_(rest, rest)], rhs[rest])
    return theta


def dc_power_flow(bbg: BusBranchGraph, injections) -> np.ndarray:
    """Line flows for per-bus net injections (MW) on the bus-branch graph.

    Each island must balance to within 1e-9 (relative to the largest
    injection); one reference bus per island.
    """
    inj = np.asarray(injections, dtype=float)
    if inj.shape != (bbg.n_buses,):
        raise ValueError(f"expected {bbg.n_buses} injections, got {inj.shape}")
    islands = bbg.islands()
    scale = 1.0 + np.abs(inj).max(initial=0.0)
    for isl in np.unique(islands):
        tot = inj[islands == isl].sum()
        if abs(tot) > BALANCE_TOL * scale:
            raise UnbalancedIsland(f"island {isl} has net injection {tot:.3e}")
    theta = _island_angles(bbg.n_buses, bbg.branches, bbg.reactance, inj, islands)
    a, b = bbg.branches[:, 0], bbg.branches[:, 1]
    return BASE_MVA * (theta[a] - theta[b]) / bbg.reactance


def _affine_injections(nbg: NodeBreakerGraph, inst: Instance):
    """Busbar net injection = const + lam * slope (mu eliminated via mu = alpha*lam + beta)."""
    z1 = nbg.busbar_zone == 1
    const = np.where(z1, -inst.load, inst.gen - inst.beta * inst.load)
    slope = np.where(z1, inst.gen, -inst.alpha * inst.load)
    return const, slope


def _lambda_interval(inst: Instance):
    lo, hi = 0.0, 1.0
    if inst.alpha > 0:
        lo = max(lo, -inst.beta / inst.alpha)
        hi = min(hi, (1.0 - inst.beta) / inst.alpha)
    elif not (0.0 <= inst.beta <= 1.0):
        return 1.0, 0.0
    return lo, hi


def breaker_flows(nbg: NodeBreakerGraph, z, busbar_injection, line_flow) -> np.ndarray:
    """Breaker flows closing the busbar balance (minimum-norm on closed rings)."""
    z = np.asarray(z)
    n = nbg.n_busbars
    out_lines = np.zeros(n)
    np.add.at(out_lines, nbg.line_busbars[:, 0], line_flow)
    np.add.at(out_lines, nbg.line_busbars[:, 1], -line_flow)
    resid = busbar_injection - out_lines
    flows = np.zeros(nbg.n_breakers)
    for s, rids in enumerate(nbg.sub_breakers):
        closed = [r for r in rids if z[r] == 1]
        if not closed:
            continue
        buses = nbg.sub_busbars[s]
        pos = {b: k for k, b in enumerate(buses)}
        A = np.zeros((len(buses), len(closed)))
        for c, r in enumerate(closed):
            i, j = nbg.breakers[r]
            A[pos[i], c] = 1.0
            A[pos[j], c] = -1.0
        sol, *_ = np.linalg.lstsq(A, resid[buses], rcond=None)
        flows[closed] = sol
    return flows


def solve_dcopf(nbg: NodeBreakerGraph, z, inst: Instance, check: bool = True,
                raise_infeasible: bool = False, bbg: BusBranchGraph | None = None) -> DcopfSolution:
    """Maximum lambda for the fixed configuration ``z``."""
    z = as_config(nbg, z)
    if check:
        rep = structural_check(nbg, z)
        if not rep.feasible:
            raise StructurallyInfeasible(f"configuration violates {rep.n_violations} structural rules")
    if bbg is None:
        bbg = to_bus_branch(nbg, z)
    const, slope = _affine_injections(nbg, inst)
    bc = bbg.bus_injection(const)
    bs = bbg.bus_injection(slope)
    islands = bbg.islands()
    lo, hi = _lambda_interval(inst)
    scale = 1.0 + max(np.abs(inst.gen).max(initial=0.0), np.abs(inst.load).max(initial=0.0))
    for isl in np.unique(islands):
        m = islands == isl
        a, b = bc[m].sum(), bs[m].sum()
        if abs(b) <= BALANCE_TOL * scale:
            if abs(a) > 1e-7 * scale:
                return _infeasible(raise_infeasible, "island cannot balance")
            continue
        lam_fix = -a / b
        lo, hi = max(lo, lam_fix), min(hi, lam_fix)
    if lo > hi + 1e-9:
        return _infeasible(raise_infeasible, "balance forces lambda outside its bounds")
    theta = _island_angles(bbg.n_buses, bbg.branches, bbg.reactance, np.column_stack([bc, bs]), islands)
    ia, ib = bbg.branches[:, 0], bbg.branches[:, 1]
    f = BASE_MVA * (theta[ia] - theta[ib]) / bbg.reactance[:, None]
    f0, f1 = f[:, 0], f[:, 1]
    F = bbg.limit
    tiny = 1e-12
    pos, neg = f1 > tiny, f1 < -tiny
    if pos.any():
        hi = min(hi, np.min((F[pos] - f0[pos]) / f1[pos]))
        lo = max(lo, np.max((-F[pos] - f0[pos]) / f1[pos]))
    if neg.any():
        hi = min(hi, np.min((-F[neg] - f0[neg]) / f1[neg]))
        lo = max(lo, np.max((F[neg] - f0[neg]) / f1[neg]))
    flat = ~(pos | neg)
    if np.any(np.abs(f0[flat]) > F[flat] + 1e-7):
        return _infeasible(raise_infeasible, "flow limits violated independent of lambda")
    if lo > hi + 1e-9:
        return _infeasible(raise_infeasible, "no lambda satisfies the flow limits")
    lam = float(max(min(hi, 1.0), lo)) if hi >= lo else float(lo)
    lam = min(max(lam, 0.0), 1.0)
    mu = inst.alpha * lam + inst.beta
    line_flow = f0 + lam * f1
    theta_bus = theta[:, 0] + lam * theta[:, 1]
    busbar_inj = const + lam * slope
    return DcopfSolution(
        status="optimal",
        lam=lam,
        mu=float(mu),
        theta=theta_bus[bbg.busbar_bus],
        line_flow=line_flow,
        breaker_flow=breaker_flows(nbg, z, busbar_inj, line_flow),
    )


def _infeasible(raise_it: bool, why: str) -> DcopfSolution:
    if raise_it:
        raise LpInfeasible(why)
    return DcopfSolution("infeasible")


# ---------------------------------------------------------------------------
# explicit LP


@dataclass
class DcopfLayout:
    """Column positions of the DCOPF variables."""

    n_busbars: int
    n_lines: int
    n_breakers: int

    lam: int = 0
    mu: int = 1

    @property
    def theta(self) -> slice:
        return slice(2, 2 + self.n_busbars)

    @property
    def line(self) -> slice:
        s = 2 + self.n_busbars
        return slice(s, s + self.n_lines)

    @property
    def breaker(self) -> slice:
        s = 2 + self.n_busbars + self.n_lines
        return slice(s, s + self.n_breakers)

    @property
    def n_vars(self) -> int:
        return 2 + self.n_busbars + self.n_lines + self.n_breakers

    def names(self) -> list[str]:
        return (["lambda", "mu"] + [f"theta_{i}" for i in range(self.n_busbars)]
                + [f"f_line_{l}" for l in range(self.n_lines)]
                + [f"f_breaker_{r}" for r in range(self.n_breakers)])


def common_rows(nbg: NodeBreakerGraph, inst: Instance, lay: DcopfLayout, n_cols: int):
    """Rows shared by the fixed-z LP and the MIP: (3a), (3d), (3i) and bounds."""
    nb, nl = nbg.n_busbars, nbg.n_lines
    rows, rhs = [], []
    r = np.zeros(n_cols)
    r[lay.mu] = 1.0
    r[lay.lam] = -inst.alpha
    rows.append(r)
    rhs.append(inst.beta)
    th0 = lay.theta.start
    ln0 = lay.line.start
    br0 = lay.breaker.start
    for l, (i, j) in enumerate(nbg.line_busbars):
        r = np.zeros(n_cols)
        r[ln0 + l] = 1.0
        k = BASE_MVA / nbg.spec.lines[l].reactance
        r[th0 + i] -= k
        r[th0 + j] += k
        rows.append(r)
        rhs.append(0.0)
    z1 = nbg.busbar_zone == 1
    bal = np.zeros((nb, n_cols))
    for l, (i, j) in enumerate(nbg.line_busbars):
        bal[i, ln0 + l] += 1.0
        bal[j, ln0 + l] -= 1.0
    for rr, (i, j) in enumerate(nbg.breakers):
        bal[i, br0 + rr] += 1.0
        bal[j, br0 + rr] -= 1.0
    bal_rhs = np.zeros(nb)
    for i in range(nb):
        if z1[i]:
            bal[i, lay.lam] = -inst.gen[i]
            bal_rhs[i] = -inst.load[i]
        else:
            bal[i, lay.mu] = inst.load[i]
            bal_rhs[i] = inst.gen[i]
    lb = np.full(n_cols, -np.inf)
    ub = np.full(n_cols, np.inf)
    lb[[lay.lam, lay.mu]] = 0.0
    ub[[lay.lam, lay.mu]] = 1.0
    lb[lay.theta] = -np.pi
    ub[lay.theta] = np.pi
    lim = nbg.limit
    lb[lay.line] = -lim
    ub[lay.line] = lim
    assert nl == lim.size
    return np.vstack(rows + list(bal)), np.array(rhs + list(bal_rhs)), lb, ub


def build_dcopf(nbg: NodeBreakerGraph, z, inst: Instance) -> LpProblem:
    """Full DCOPF LP for fixed ``z``: closed breakers tie angles, open ones carry no flow."""
    z = as_config(nbg, z)
    lay = DcopfLayout(nbg.n_busbars, nbg.n_lines, nbg.n_breakers)
    n = lay.n_vars
    A_eq, b_eq, lb, ub = common_rows(nbg, inst, lay, n)
    extra = []
    th0, br0 = lay.theta.start, lay.breaker.start
    for r, (i, j) in enumerate(nbg.breakers):
        row = np.zeros(n)
        if z[r] == 1:
            row[th0 + i] = 1.0
            row[th0 + j] = -1.0
        else:
            row[br0 + r] = 1.0
        extra.append(row)
    # one reference angle per island of the busbar graph
    uf = UnionFind(nbg.n_busbars)
    for r in np.nonzero(z == 1)[0]:
        uf.union(*map(int, nbg.breakers[r]))
    for i, j in nbg.line_busbars:
        uf.union(int(i), int(j))
    labels = uf.labels()
    for isl in range(labels.max() + 1):
        ref = int(np.nonzero(labels == isl)[0][0])
        row = np.zeros(n)
        row[th0 + ref] = 1.0
        extra.append(row)
    A_eq = np.vstack([A_eq] + extra)
    b_eq = np.concatenate([b_eq, np.zeros(len(extra))])
    c = np.zeros(n)
    c[lay.lam] = 1.0
    return LpProblem(c=c, A_eq=A_eq, b_eq=b_eq, lb=lb, ub=ub, sense="max", var_names=lay.names())


def solve_dcopf_lp(nbg: NodeBreakerGraph, z, inst: Instance, method: str = "simplex") -> DcopfSolution:
    """Solve :func:`build_dcopf` with the generic LP solver."""
    lay = DcopfLayout(nbg.n_busbars, nbg.n_lines, nbg.n_breakers)
    sol = solve_lp(build_dcopf(nbg, z, inst), method=method)
    if not sol.optimal:
        return DcopfSolution(sol.status)
    x = sol.x
    return DcopfSolution("optimal", float(x[lay.lam]), float(x[lay.mu]), x[lay.theta].copy(),
                         x[lay.line].copy(), x[lay.breaker].copy())


def base_lambda(nbg: NodeBreakerGraph, inst: Instance) -> float:
    sol = solve_dcopf(nbg, nbg.all_closed(), inst, check=False)
    return sol.lam if sol.feasible else float("nan")

"""Repair of predicted breaker configurations and benchmark reporting."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dcopf import base_lambda, solve_dcopf
from .grid_model import Instance, NodeBreakerGraph
from .topo import as_config, busbar_components, structural_check, to_bus_branch

FlowFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class RepairAction:
    rule: str  # dangling | split | island | thermal | fallback
    breaker: int
    old: int
    new: int

    def to_dict(self) -> dict:
        return {"rule": self.rule, "breaker": self.breaker, "old": self.old, "new": self.new}


@dataclass
class RepairTrace:
    z_in: np.ndarray
    z_out: np.ndarray
    actions: list[RepairAction] = field(default_factory=list)
    iterations: int = 0

    @property
    def changed(self) -> bool:
        return bool(self.actions)

    def count(self, rule: str) -> int:
        return sum(a.rule == rule for a in self.actions)

    def to_dict(self) -> dict:
        return {"z_in": self.z_in.tolist(), "z_out": self.z_out.tolist(),
                "actions": [a.to_dict() for a in self.actions], "iterations": self.iterations}


def _violations(nbg: NodeBreakerGraph, z: np.ndarray) -> int:
    return structural_check(nbg, z).n_violations


def _overload(flows: np.ndarray, limit: np.ndarray) -> float:
    return float(np.maximum(np.abs(flows) - limit, 0.0).sum())


def _n_islands(nbg: NodeBreakerGraph, z: np.ndarray) -> int:
    bbg = to_bus_branch(nbg, z)
    return int(bbg.islands().max()) + 1 if bbg.n_buses else 0


def repair(nbg: NodeBreakerGraph, z, flow_fn: FlowFn | None = None, probs=None,
           inst: Instance | None = None) -> tuple[np.ndarray, RepairTrace]:
    """Reclose breakers until the configuration is structurally legal.

    Rules, applied in order:

    * dangling: a ring busbar with both breakers open gets the incident
      breaker whose closure clears the most violations (ties: lower index);
    * split: a substation in more than two pieces has open breakers reclosed
      until exactly two pieces remain, most confidently closed first when
      ``probs`` is given, else lowest index;
    * island: while the bus-branch network is disconnected, reclose the
      open breaker that merges islands (same preference order);
    * thermal: with ``flow_fn`` (predicted flows; a 2-D argument holds one
      configuration per row), for each
      overloaded line try the open breakers of its two endpoint substations
      and keep the one that most reduces total predicted overload; passes
      repeat until no reclose helps, so the result is a fixed point.

    With ``inst`` the result must also admit a DCOPF dispatch; otherwise the
    all-closed configuration is returned. Breakers are only ever reclosed.
    """
    z = as_config(nbg, z).copy()
    trace = RepairTrace(z.copy(), z)
    pref = np.zeros(nbg.n_breakers) if probs is None else np.asarray(probs, dtype=float)

    def close(r: int, rule: str) -> None:
        trace.actions.append(RepairAction(rule, int(r), 0, 1))
        z[r] = 1

    def ranked(cands) -> list[int]:
        return sorted((int(r) for r in cands), key=lambda r: (-pref[r], r))

    # dangling busbars
    while True:
        rep = structural_check(nbg, z)
        trace.iterations += 1
        if not rep.dangling_busbars:
            break
        inc = nbg.busbar_breakers()
        b = rep.dangling_busbars[0]
        best, best_v = None, None
        for r in sorted(inc[b]):
            z[r] = 1
            v = _violations(nbg, z)
            z[r] = 0
            if best_v is None or v < best_v:
                best, best_v = r, v
        close(best, "dangling")

    # substations in more than two pieces
    labels = busbar_components(nbg, z)
    for s in range(nbg.n_substations):
        while len(set(labels[nbg.sub_busbars[s]])) > 2:
            opened = [r for r in nbg.sub_breakers[s] if z[r] == 0]
            close(ranked(opened)[0], "split")
            labels = busbar_components(nbg, z)
            trace.iterations += 1

    # islanding
    while _n_islands(nbg, z) > 1:
        trace.iterations += 1
        before = _n_islands(nbg, z)
        for r in ranked(np.flatnonzero(z == 0)):
            z[r] = 1
            if _n_islands(nbg, z) < before:
                z[r] = 0
                close(r, "island")
                break
            z[r] = 0
        else:  # pragma: no cover - closing everything always reconnects
            break

    # predicted thermal overloads
    if flow_fn is not None:
        limit = nbg.limit
        subs = nbg.line_subs
        improved = True
        while improved:
            improved = False
            trace.iterations += 1
            flows = flow_fn(z)
            for l in np.argsort(-(np.abs(flows) - limit), kind="stable"):
                if abs(flows[l]) <= limit[l]:
                    break
                cands = sorted({r for s in subs[l] for r in nbg.sub_breakers[s] if z[r] == 0})
                if not cands:
                    continue
                trial = np.repeat(z[None, :], len(cands), axis=0)
                trial[np.arange(len(cands)), cands] = 1
                fs = np.asarray(flow_fn(trial)).reshape(len(cands), -1)
                best, best_val, best_flows = None, _overload(flows, limit), None
                for r, f in zip(cands, fs):
                    val = _overload(f, limit)
                    if val < best_val - 1e-9:
                        best, best_val, best_flows = r, val, f
                if best is not None:
                    close(best, "thermal")
                    flows = best_flows
                    improved = True

    if inst is not None and not solve_dcopf(nbg, z, inst, check=False).feasible:
        for r in np.flatnonzero(z == 0):
            close(r, "fallback")
    trace.z_out = z
    return z, trace


def evaluate_config(nbg: NodeBreakerGraph, inst: Instance, z) -> float:
    """Export ratio of a structurally legal configuration (NaN if no dispatch exists)."""
    sol = solve_dcopf(nbg, z, inst, check=True)
    return float(sol.lam) if sol.feasible else float("nan")


# ---------------------------------------------------------------------------
# benchmark


REPORT_COLUMNS = [
    "variant", "n_instances", "n_breakers", "uplift_pct", "violation_pct", "feasible_pct",
    "infer_ms", "repair_ms", "solver_ms", "speedup", "accuracy_pct",
]


@dataclass
class InstanceResult:
    lam_base: float
    lam_pred: float
    lam_star: float
    violated: bool
    feasible: bool
    infer_s: float
    repair_s: float
    solver_s: float


@dataclass
class BenchmarkReport:
    rows: list[dict]
    details: dict[str, list[InstanceResult]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'variant':<16}{'uplift%':>9}{'viol%':>8}{'feas%':>8}{'infer ms':>10}{'speedup':>10}{'acc%':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            acc = r.get("accuracy_pct")
            lines.append(f"{r['variant']:<16}{r['uplift_pct']:>9.2f}{r['violation_pct']:>8.1f}{r['feasible_pct']:>8.1f}"
                         f"{r['infer_ms'] + r['repair_ms']:>10.2f}{r['speedup']:>10.1f}"
                         f"{(acc if acc is not None and acc == acc else float('nan')):>8.1f}")
        return "\n".join(lines)


def summarize(variant: str, n_breakers: int, res: list[InstanceResult]) -> dict:
    ok = [r for r in res if np.isfinite(r.lam_pred) and r.lam_base > 0]
    uplift = 100.0 * float(np.mean([(r.lam_pred - r.lam_base) / r.lam_base for r in ok])) if ok else float("nan")
    with_star = [r for r in res if np.isfinite(r.lam_star) and r.lam_star > 0]
    acc = 100.0 * float(np.mean([(r.lam_pred if np.isfinite(r.lam_pred) else 0.0) / r.lam_star for r in with_star])) \
        if with_star else float("nan")
    infer = statistics.median(r.infer_s for r in res)
    rep = statistics.median(r.repair_s for r in res)
    solver = [r.solver_s for r in res if np.isfinite(r.solver_s)]
    solver_med = statistics.median(solver) if solver else float("nan")
    return {
        "variant": variant,
        "n_instances": len(res),
        "n_breakers": n_breakers,
        "uplift_pct": uplift,
        "violation_pct": 100.0 * float(np.mean([r.violated for r in res])),
        "feasible_pct": 100.0 * float(np.mean([r.feasible for r in res])),
        "infer_ms": 1e3 * infer,
        "repair_ms": 1e3 * rep,
        "solver_ms": 1e3 * solver_med,
        "speedup": solver_med / (infer + rep) if solver and infer + rep > 0 else float("nan"),
        "accuracy_pct": acc,
    }


def timed(fn, repeats: int = 1):
    """Result of ``fn()`` and its median wall time over ``repeats`` calls."""
    times, out = [], None
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return out, statistics.median(times)


def evaluate_predictor(nbg: NodeBreakerGraph, items, predict: Callable, flow_fn_for: Callable | None = None,
                       repeats: int = 1) -> list[InstanceResult]:
    """Run predict -> repair -> DCOPF on labelled items.

    ``predict(inst)`` returns (binary z, probabilities or None);
    ``flow_fn_for(inst)`` returns the flow predictor used by the thermal rule.
    Items need ``inst``, ``lam`` (label, may be NaN) and ``solver_time``.
    """
    out = []
    for it in items:
        inst = it.inst
        (z_hat, probs), t_inf = timed(lambda: predict(inst), repeats)
        flow_fn = flow_fn_for(inst) if flow_fn_for else None
        (z_rep, trace), t_rep = timed(lambda: repair(nbg, z_hat, flow_fn, probs, inst), repeats)
        lam = evaluate_config(nbg, inst, z_rep)
        out.append(InstanceResult(
            lam_base=base_lambda(nbg, inst), lam_pred=lam, lam_star=float(getattr(it, "lam", float("nan"))),
            violated=trace.changed, feasible=structural_check(nbg, z_rep).feasible and np.isfinite(lam),
            infer_s=t_inf, repair_s=t_rep, solver_s=float(getattr(it, "solver_time", float("nan"))),
        ))
    return out


def run_benchmark(nbg: NodeBreakerGraph, items, variants: dict[str, tuple[Callable, Callable | None]],
                  repeats: int = 1) -> BenchmarkReport:
    """One report row per named predictor variant."""
    rows, details = [], {}
    for name, (predict, flow_fn_for) in variants.items():
        res = evaluate_predictor(nbg, items, predict, flow_fn_for, repeats)
        details[name] = res
        rows.append(summarize(name, nbg.n_breakers, res))
    return BenchmarkReport(rows, details)

"""Dense linear algebra and linear programming.

``solve_lp`` is a two-phase tableau simplex that always pivots with Bland's
rule, so it is deterministic and cannot cycle. A HiGHS backend (through
scipy) is available for callers that need throughput, e.g. branch-and-bound
on larger networks; both return the same :class:`LpSolution`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

FEAS_TOL = 1e-7
PIVOT_TOL = 1e-9
SINGULAR_TOL = 1e-12


class SingularMatrixError(ArithmeticError):
    pass


def solve_linear(A, b) -> np.ndarray:
    """Solve ``A x = b`` by Gaussian elimination with partial pivoting.

    Raises :class:`SingularMatrixError` when a pivot falls below 1e-12
    (relative to the largest entry of ``A``).
    """
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if b.shape[0] != n:
        raise ValueError("right-hand side length does not match matrix")
    squeeze = b.ndim == 1
    M = np.hstack([A, b.reshape(n, -1)])
    scale = max(np.abs(A).max(initial=0.0), 1.0)
    for k in range(n):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if abs(M[p, k]) < SINGULAR_TOL * scale:
            raise SingularMatrixError(f"pivot {M[p, k]:.3e} at column {k}")
        if p != k:
            M[[k, p]] = M[[p, k]]
        factors = M[k + 1:, k] / M[k, k]
        M[k + 1:, k:] -= np.outer(factors, M[k, k:])
    x = np.zeros((n, M.shape[1] - n))
    for k in range(n - 1, -1, -1):
        x[k] = (M[k, n:] - M[k, k + 1:n] @ x[k + 1:]) / M[k, k]
    return x[:, 0] if squeeze else x


@dataclass
class LpProblem:
    """``sense`` c @ x subject to A_ub x <= b_ub, A_eq x == b_eq, lb <= x <= ub."""

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    sense: Literal["max", "min"] = "max"
    var_names: list[str] | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.size
        self.A_ub = np.zeros((0, n)) if self.A_ub is None else np.atleast_2d(np.asarray(self.A_ub, dtype=float))
        self.b_ub = np.zeros(0) if self.b_ub is None else np.asarray(self.b_ub, dtype=float).ravel()
        self.A_eq = np.zeros((0, n)) if self.A_eq is None else np.atleast_2d(np.asarray(self.A_eq, dtype=float))
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).ravel()
        self.lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=float).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).copy()
        if self.A_ub.shape[0] == 0:
            self.A_ub = self.A_ub.reshape(0, n)
        if self.A_eq.shape[0] == 0:
            self.A_eq = self.A_eq.reshape(0, n)
        if self.A_ub.shape != (self.b_ub.size, n) or self.A_eq.shape != (self.b_eq.size, n):
            raise ValueError("inconsistent LP dimensions")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bounds must have one entry per variable")
        if not (np.all(np.isfinite(self.b_ub)) and np.all(np.isfinite(self.b_eq))):
            raise ValueError("right-hand sides must be finite")
        if self.sense not in ("max", "min"):
            raise ValueError(f"unknown sense {self.sense!r}")

    @property
    def n_vars(self) -> int:
        return self.c.size

    def max_violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        v = [0.0]
        if self.b_ub.size:
            v.append(float(np.max(self.A_ub @ x - self.b_ub)))
        if self.b_eq.size:
            v.append(float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        v.append(float(np.max(self.lb - x, initial=0.0)))
        v.append(float(np.max(x - self.ub, initial=0.0)))
        return max(v)


@dataclass
class LpSolution:
    status: Literal["optimal", "infeasible", "unbounded"]
    x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective: float = float("nan")
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _to_standard_form(p: LpProblem):
    """Rewrite as min c'y s.t. A_ub y <= b_ub, A_eq y == b_eq, y >= 0.

    Returns ``(c, A_ub, b_ub, A_eq, b_eq, recover)`` with ``recover`` mapping
    y back to the original variables, or None if some lb > ub.
    """
    n = p.n_vars
    cols = []  # (original variable, sign)
    offset = np.zeros(n)
    extra_ub_rows = []  # (col index, bound)
    for j in range(n):
        lo, hi = p.lb[j], p.ub[j]
        if lo > hi + FEAS_TOL:
            return None
        if np.isfinite(lo):
            offset[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                extra_ub_rows.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    m_cols = len(cols)
    T = np.zeros((n, m_cols))
    for k, (j, s) in enumerate(cols):
        T[j, k] = s
    # x = offset + T y
    sign = -1.0 if p.sense == "max" else 1.0
    c = sign * (p.c @ T)
    A_ub = p.A_ub @ T
    b_ub = p.b_ub - p.A_ub @ offset
    if extra_ub_rows:
        E = np.zeros((len(extra_ub_rows), m_cols))
        eb = np.zeros(len(extra_ub_rows))
        for r, (k, bound) in enumerate(extra_ub_rows):
            E[r, k] = 1.0
            eb[r] = bound
        A_ub = np.vstack([A_ub, E])
        b_ub = np.concatenate([b_ub, eb])
    A_eq = p.A_eq @ T
    b_eq = p.b_eq - p.A_eq @ offset

    def recover(y):
        return offset + T @ y

    return c, A_ub, b_ub, A_eq, b_eq, recover


def _pivot(tab: np.ndarray, row: int, col: int) -> None:
    tab[row] /= tab[row, col]
    colv = tab[:, col].copy()
    colv[row] = 0.0
    nz = np.nonzero(np.abs(colv) > 0.0)[0]
    if nz.size:
        tab[nz] -= np.outer(colv[nz], tab[row])


def _simplex_iterations(tab, basis, n_cols, max_iter, allowed):
    """Run Bland's rule on ``tab`` (last row = reduced costs, last col = rhs).

    Returns "optimal", "unbounded" or "iteration_limit" and the pivot count.
    """
    m = tab.shape[0] - 1
    it = 0
    while it < max_iter:
        red = tab[-1, :n_cols]
        cand = np.nonzero((red < -PIVOT_TOL) & allowed)[0]
        if cand.size == 0:
            return "optimal", it
        col = int(cand[0])
        colv = tab[:m, col]
        pos = np.nonzero(colv > PIVOT_TOL)[0]
        if pos.size == 0:
            return "unbounded", it
        ratios = tab[pos, -1] / colv[pos]
        best = ratios.min()
        ties = pos[ratios <= best + 1e-12 * max(1.0, abs(best))]
        # Bland: among ties leave the basic variable with the smallest index
        row = int(ties[np.argmin(basis[ties])])
        _pivot(tab, row, col)
        basis[row] = col
        it += 1
    return "iteration_limit", it


def _solve_simplex(p: LpProblem, max_iter: int) -> LpSolution:
    std = _to_standard_form(p)
    if std is None:
        return LpSolution("infeasible")
    c, A_ub, b_ub, A_eq, b_eq, recover = std
    n = c.size
    m_ub, m_eq = b_ub.size, b_eq.size
    m = m_ub + m_eq
    # columns: structural | slacks (ub rows) | artificials (all rows that need one)
    A = np.zeros((m, n + m_ub))
    b = np.concatenate([b_ub, b_eq])
    A[:m_ub, :n] = A_ub
    A[m_ub:, :n] = A_eq
    A[:m_ub, n:n + m_ub] = np.eye(m_ub)
    neg = b < 0
    A[neg] *= -1.0
    b = np.abs(b)
    n_real = n + m_ub
    # rows whose slack can start basic: ub rows with b >= 0 originally
    needs_art = np.ones(m, dtype=bool)
    needs_art[:m_ub] = neg[:m_ub]
    art_rows = np.nonzero(needs_art)[0]
    n_art = art_rows.size
    n_cols = n_real + n_art
    tab = np.zeros((m + 1, n_cols + 1))
    tab[:m, :n_real] = A
    tab[:m, -1] = b
    basis = np.zeros(m, dtype=int)
    for r in range(m):
        if not needs_art[r]:
            basis[r] = n + r
    for k, r in enumerate(art_rows):
        tab[r, n_real + k] = 1.0
        basis[r] = n_real + k
    iters = 0
    if n_art:
        tab[-1, n_real:n_cols] = 1.0
        for r in art_rows:
            tab[-1] -= tab[r]
        allowed = np.ones(n_cols, dtype=bool)
        status, it = _simplex_iterations(tab, basis, n_cols, max_iter, allowed)
        iters += it
        if status == "iteration_limit":
            raise RuntimeError("simplex iteration limit reached in phase 1")
        if -tab[-1, -1] > FEAS_TOL * max(1.0, np.abs(b).max(initial=0.0)):
            return LpSolution("infeasible", iterations=iters)
        # drive remaining artificials out of the basis
        keep = np.ones(m, dtype=bool)
        for r in range(m):
            if basis[r] >= n_real:
                row = tab[r, :n_real]
                nz = np.nonzero(np.abs(row) > PIVOT_TOL)[0]
                if nz.size:
                    _pivot(tab, r, int(nz[0]))
                    basis[r] = int(nz[0])
                else:
                    keep[r] = False
        if not keep.all():
            tab = np.vstack([tab[:m][keep], tab[-1:]])
            basis = basis[keep]
            m = basis.size
    # phase 2 on the real columns only
    tab = np.hstack([tab[:, :n_real], tab[:, -1:]])
    tab[-1] = 0.0
    tab[-1, :n] = c
    for r in range(m):
        cb = tab[-1, basis[r]]
        if cb != 0.0:
            tab[-1] -= cb * tab[r]
    allowed = np.ones(n_real, dtype=bool)
    status, it = _simplex_iterations(tab, basis, n_real, max_iter, allowed)
    iters += it
    if status == "iteration_limit":
        raise RuntimeError("simplex iteration limit reached in phase 2")
    if status == "unbounded":
        return LpSolution("unbounded", iterations=iters)
    y = np.zeros(n_real)
    y[basis] = tab[:m, -1]
    x = recover(y[:n])
    return LpSolution("optimal", x, float(p.c @ x), iters)


def _solve_highs(p: LpProblem, _objective: bool = True) -> LpSolution:
    from scipy.optimize import linprog

    sign = -1.0 if p.sense == "max" else 1.0
    if not _objective:
        sign = 0.0
    bounds = list(zip(
        [None if not np.isfinite(v) else v for v in p.lb],
        [None if not np.isfinite(v) else v for v in p.ub],
    ))
    res = linprog(
        sign * p.c,
        A_ub=p.A_ub if p.b_ub.size else None,
        b_ub=p.b_ub if p.b_ub.size else None,
        A_eq=p.A_eq if p.b_eq.size else None,
        b_eq=p.b_eq if p.b_eq.size else None,
        bounds=bounds,
        method="highs",
    )
    if res.status == 0:
        x = np.asarray(res.x, dtype=float)
        return LpSolution("optimal", x, float(p.c @ x), int(res.nit))
    if res.status == 2:
        # HiGHS presolve can report "infeasible" for unbounded models
        if _objective and _solve_highs(p, _objective=False).optimal:
            return LpSolution("unbounded")
        return LpSolution("infeasible")
    if res.status == 3:
        return LpSolution("unbounded")
    raise RuntimeError(f"HiGHS failed: {res.message}")


def solve_lp(p: LpProblem, method: Literal["simplex", "highs"] = "simplex",
             max_iter: int = 50_000) -> LpSolution:
    """Solve ``p``. Infeasible and unbounded problems are statuses, not errors."""
    if method == "simplex":
        return _solve_simplex(p, max_iter)
    if method == "highs":
        return _solve_highs(p)
    raise ValueError(f"unknown LP method {method!r}")


def dump_lp(p: LpProblem) -> str:
    """Plain-text listing of ``p``, one constraint per line.

    Format::

        sense max
        obj <c_0> <c_1> ...
        var <name> <lb> <ub>
        le <a_0> ... <a_n-1> <rhs>
        eq <a_0> ... <a_n-1> <rhs>
    """
    names = p.var_names or [f"x{j}" for j in range(p.n_vars)]
    fmt = lambda v: repr(float(v))  # noqa: E731
    out = [f"sense {p.sense}", "obj " + " ".join(fmt(v) for v in p.c)]
    for name, lo, hi in zip(names, p.lb, p.ub):
        out.append(f"var {name} {fmt(lo)} {fmt(hi)}")
    for row, rhs in zip(p.A_ub, p.b_ub):
        out.append("le " + " ".join(fmt(v) for v in row) + " " + fmt(rhs))
    for row, rhs in zip(p.A_eq, p.b_eq):
        out.append("eq " + " ".join(fmt(v) for v in row) + " " + fmt(rhs))
    return "\n".join(out) + "\n"

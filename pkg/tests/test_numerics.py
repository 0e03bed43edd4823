import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridsplit.numerics import LpProblem, SingularMatrixError, dump_lp, solve_linear, solve_lp


def test_solve_linear_hand_system():
    # 2x + y = 3, x + 3y = 5  ->  x = 4/5, y = 7/5
    x = solve_linear([[2.0, 1.0], [1.0, 3.0]], [3.0, 5.0])
    assert np.allclose(x, [0.8, 1.4], atol=1e-14)


def test_solve_linear_needs_pivoting():
    x = solve_linear([[0.0, 1.0], [1.0, 0.0]], [2.0, 3.0])
    assert np.allclose(x, [3.0, 2.0])


def test_solve_linear_singular():
    with pytest.raises(SingularMatrixError):
        solve_linear([[1.0, 2.0], [2.0, 4.0]], [1.0, 2.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_solve_linear_matches_numpy(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n)) + n * np.eye(n)
    b = rng.normal(size=(n, 2))
    assert np.allclose(solve_linear(A, b), np.linalg.solve(A, b), atol=1e-9)


def _toy():
    # max 3x + 2y  s.t.  x + y <= 4, x + 3y <= 6, x <= 3  -> (3, 1), objective 11
    return LpProblem(c=[3.0, 2.0], A_ub=[[1, 1], [1, 3], [1, 0]], b_ub=[4, 6, 3], lb=[0, 0], ub=[np.inf, np.inf])


@pytest.mark.parametrize("method", ["simplex", "highs"])
def test_lp_textbook(method):
    sol = solve_lp(_toy(), method)
    assert sol.optimal
    assert sol.objective == pytest.approx(11.0, abs=1e-9)
    assert np.allclose(sol.x, [3.0, 1.0], atol=1e-9)


@pytest.mark.parametrize("method", ["simplex", "highs"])
def test_lp_infeasible_and_unbounded(method):
    infeasible = LpProblem(c=[1.0], A_ub=[[1.0]], b_ub=[-1.0], lb=[0.0], ub=[np.inf])
    assert solve_lp(infeasible, method).status == "infeasible"
    unbounded = LpProblem(c=[1.0, 1.0], A_ub=[[1.0, -1.0]], b_ub=[1.0], lb=[0, 0], ub=[np.inf, np.inf])
    assert solve_lp(unbounded, method).status == "unbounded"


def test_lp_equality_and_free_variables():
    # max -|x - 2| style: max -t s.t. t >= x - 2, t >= 2 - x, x + y = 5, y = 3 (x free)
    p = LpProblem(c=[0.0, 0.0, -1.0], A_ub=[[1, 0, -1], [-1, 0, -1]], b_ub=[2, -2],
                  A_eq=[[1, 1, 0], [0, 1, 0]], b_eq=[5, 3], lb=[-np.inf, -np.inf, 0], ub=[np.inf] * 3)
    sol = solve_lp(p, "simplex")
    assert sol.optimal and np.allclose(sol.x, [2, 3, 0], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_simplex_agrees_with_highs(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(2, 6), rng.integers(1, 6)
    A = rng.uniform(-1, 2, size=(m, n))
    p = LpProblem(c=rng.normal(size=n), A_ub=A, b_ub=rng.uniform(0.5, 3, size=m),
                  lb=np.zeros(n), ub=rng.uniform(1, 4, size=n))
    a, b = solve_lp(p, "simplex"), solve_lp(p, "highs")
    assert a.status == b.status == "optimal"
    assert a.objective == pytest.approx(b.objective, abs=1e-7)
    assert p.max_violation(a.x) < 1e-7


def test_degenerate_cycling_example_terminates():
    # Beale's classic cycling LP; Bland's rule must terminate at objective 0.05.
    p = LpProblem(c=[0.75, -150, 0.02, -6],
                  A_ub=[[0.25, -60, -0.04, 9], [0.5, -90, -0.02, 3], [0, 0, 1, 0]], b_ub=[0, 0, 1],
                  lb=[0] * 4, ub=[np.inf] * 4)
    sol = solve_lp(p, "simplex")
    assert sol.optimal and sol.objective == pytest.approx(0.05, abs=1e-9)


def test_dump_lp_lists_every_row():
    lines = dump_lp(_toy()).splitlines()
    assert lines[0] == "sense max"
    assert sum(ln.startswith("le ") for ln in lines) == 3
    assert sum(ln.startswith("var ") for ln in lines) == 2

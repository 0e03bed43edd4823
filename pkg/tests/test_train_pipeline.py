from types import SimpleNamespace

import numpy as np
import pytest

from conftest import bus_branch
from gridsplit.dcopf import dc_power_flow, solve_dcopf
from gridsplit.discrete_opt import brute_force_enum
from gridsplit.grid_model import base_instance, perturb_instance
from gridsplit.lgnn import EmptyDataset, LgnnModel, PsiStructure, psi_forward
from gridsplit.nn import Tensor, numerical_grad
from gridsplit.topo import random_feasible_config, to_bus_branch
from gridsplit.train_pipeline import (ABLATIONS, HeteroHyper, LabeledInstance, LossWeights, MissingCheckpoint,
                                      NonFiniteLoss, capacity_penalty, dangling_penalty, feasibility_penalties,
                                      flow_consistency_loss, group_penalty, redistribute_injections,
                                      soft_flow_consistency, total_loss, train_hetero)


def test_redistribution_hand_example():
    nbg = SimpleNamespace(n_substations=1, busbar_sub=np.zeros(4, dtype=int), spec=SimpleNamespace(zone_of=[1]))
    inst = SimpleNamespace(gen=np.array([20.0, 0, 20.0, 0]), load=np.array([0, 4.0, 0, 4.0]))
    pg, pd = redistribute_injections(nbg, inst, 0.5, 0.9)
    assert pg.tolist() == [5.0] * 4
    assert pd.tolist() == [2.0] * 4  # zone-1 load is not scaled


def test_redistribution_conserves_totals(desk, desk_inst):
    lam, mu = 0.37, 0.81
    pg, pd = redistribute_injections(desk, desk_inst, lam, mu)
    zone = np.asarray(desk.spec.zone_of)
    S = desk.n_substations
    tot_g = np.bincount(desk.busbar_sub, pg, S)
    tot_d = np.bincount(desk.busbar_sub, pd, S)
    assert np.allclose(tot_g, np.where(zone == 1, lam, 1.0) * desk_inst.sub_gen, rtol=1e-13)
    assert np.allclose(tot_d, np.where(zone == 2, mu, 1.0) * desk_inst.sub_load, rtol=1e-13)
    g1, d1 = redistribute_injections(desk, desk_inst, 1.0, 1.0)
    assert np.allclose(np.bincount(desk.busbar_sub, g1, S), desk_inst.sub_gen)


def test_flow_consistency_examples():
    bbg = bus_branch([[0, 1], [1, 2], [0, 2]], [0.1, 0.2, 0.3])
    pg, pd = np.array([2.0, 0, 0]), np.zeros(3)
    assert flow_consistency_loss(np.zeros(3), pg, pd, bbg).item() == pytest.approx(4.0)
    pg, pd = np.array([3.0, 1.0, 0.0]), np.array([0.0, 0.0, 4.0])
    f = dc_power_flow(bbg, pg - pd)
    assert flow_consistency_loss(f, pg, pd, bbg).item() <= 1e-12
    ft = Tensor(np.array([0.3, -1.0, 2.0]), requires_grad=True)
    flow_consistency_loss(ft, pg, pd, bbg).backward()
    num = numerical_grad(lambda: flow_consistency_loss(ft, pg, pd, bbg), ft)
    assert np.allclose(ft.grad, num, rtol=1e-6)


def test_flow_consistency_zero_on_dc_solutions(desk, desk_inst, rng):
    from gridsplit.topo import zone_injections

    for _ in range(5):
        z = random_feasible_config(desk, rng, 0.5)
        sol = solve_dcopf(desk, z, desk_inst)
        if not sol.feasible:
            continue
        pg, pd = zone_injections(desk, desk_inst, sol.lam, sol.mu)
        val = flow_consistency_loss(sol.line_flow, pg, pd, to_bus_branch(desk, z), scale=100.0).item()
        assert val <= 1e-12


def test_soft_consistency_matches_hard_at_binary(desk, desk_inst, rng):
    lg = LgnnModel(hidden=8, layers=2, seed=0)
    st = PsiStructure.build(desk)
    pg, pd = redistribute_injections(desk, desk_inst, 0.6, 0.5)
    zs = np.array([random_feasible_config(desk, rng, 0.6) for _ in range(3)])
    out = psi_forward(lg, st, Tensor(zs.reshape(-1).astype(float)), np.tile(pg - pd, 3), 3)
    soft = soft_flow_consistency(out, st).data
    flows = out.flows.data.reshape(3, -1)
    for k, z in enumerate(zs):
        hard = flow_consistency_loss(flows[k], pg, pd, to_bus_branch(desk, z)).item()
        assert soft[k] == pytest.approx(hard / (100.0**2 * desk.n_busbars), rel=1e-10)


def test_capacity_penalty(desk):
    lim = desk.limit
    assert capacity_penalty(0.9 * lim, lim).item() == 0.0
    f = lim.copy()
    f[0] = -1.5 * lim[0]
    assert capacity_penalty(f, lim).item() == pytest.approx(0.25 / desk.n_lines)


def test_dangling_and_group_examples(k4):
    z = k4.all_closed().astype(float)
    rids = k4.sub_breakers[0]
    z[rids[:2]] = 0.0
    assert dangling_penalty(z, k4).item() == pytest.approx(1.0)
    assert group_penalty(k4.all_closed(), k4).item() == 0.0
    z3 = k4.all_closed()
    z3[[rids[0], rids[2], rids[4]]] = 0
    assert group_penalty(z3, k4).item() == 1.0
    # two-busbar substations are exempt from the dangling term
    from conftest import hand_grid

    tri = hand_grid([[1, 2], [0, 2], [0, 1]], [1, 2, 2], [100, 0, 0], [0, 80, 40])
    assert dangling_penalty(np.zeros(3), tri).item() == 0.0


def test_dangling_surrogate_exact_on_binary(desk, rng):
    inc = desk.busbar_breakers()
    ring = [b for b in range(desk.n_busbars) if len(desk.sub_breakers[desk.busbar_sub[b]]) > 1]
    for _ in range(20):
        z = (rng.random(desk.n_breakers) < 0.7).astype(float)
        count = sum(all(z[r] == 0 for r in inc[b]) for b in ring)
        assert dangling_penalty(z, desk).item() == count


def test_dangling_gradient(desk, rng):
    p = Tensor(rng.uniform(0.05, 0.95, desk.n_breakers), requires_grad=True)
    dangling_penalty(p, desk).backward()
    assert np.allclose(p.grad, numerical_grad(lambda: dangling_penalty(p, desk), p), atol=1e-8)


def test_total_loss_recomposition_and_ablations():
    parts = {"L_br": 0.4, "L_flow": 0.3, "L_cap": 0.05, "L_dangling": 1.0, "L_group": 2.0}
    lb = total_loss(parts, LossWeights())
    assert lb.total == 0.4 + 1.2 * 0.3 + 2.0 * (0.05 + 1.0 + 2.0)
    assert lb.tensor.item() == pytest.approx(lb.total, rel=1e-15)
    no_flow = total_loss({**parts, "L_flow": 99.0}, ABLATIONS["no_flow"])
    assert no_flow.total == total_loss(parts, ABLATIONS["no_flow"]).total
    assert total_loss(parts, ABLATIONS["no_feasibility"]).total == pytest.approx(0.4 + 1.2 * 0.3)
    assert LossWeights() == LossWeights(1.2, 2.0)
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.0)
    with pytest.raises(NonFiniteLoss):
        total_loss({**parts, "L_cap": float("nan")}, LossWeights())


def test_zero_weight_drops_gradient_path():
    x = Tensor(np.array(2.0), requires_grad=True)
    lb = total_loss({"L_br": x * 0.5, "L_flow": x * x}, LossWeights(0.0, 0.0))
    lb.tensor.backward()
    assert x.grad == pytest.approx(0.5)


def test_feasibility_penalties_shapes(desk, rng):
    p = rng.random(2 * desk.n_breakers)
    cap, dang, grp = feasibility_penalties(p, np.zeros(2 * desk.n_lines), desk, n=2)
    assert cap.shape == dang.shape == grp.shape == (2,)
    assert np.all(cap.data == 0)


@pytest.fixture(scope="module")
def small_labeled(tiny):
    out = []
    for s in range(12):
        inst = perturb_instance(tiny, 50 + s)
        r = brute_force_enum(tiny, inst)
        out.append(LabeledInstance(inst, r.z, r.lam, r.mu))
    return out


@pytest.fixture(scope="module")
def small_lgnn(tiny, small_labeled):
    from gridsplit.lgnn import LgnnHyper, make_flow_dataset, train_lgnn

    data = make_flow_dataset(tiny, [it.inst for it in small_labeled], [it.z for it in small_labeled], 3, seed=0)
    model, _ = train_lgnn(data, data, LgnnHyper(hidden=8, layers=2, epochs=30, batch=8, lr=3e-3, seed=0))
    return model


def test_training_guards(tiny, small_labeled):
    with pytest.raises(MissingCheckpoint):
        train_hetero(small_labeled, [], tiny, None, HeteroHyper(epochs=1))
    with pytest.raises(EmptyDataset):
        train_hetero([], [], tiny, None, HeteroHyper(epochs=1, weights=LossWeights(0, 0)))


def test_training_reduces_bce_and_is_reproducible(tiny, small_labeled, small_lgnn):
    lgnn = small_lgnn
    hyper = HeteroHyper(hidden=12, layers=2, epochs=15, batch=4, lr=1e-2, seed=7)
    m1, rows1 = train_hetero(small_labeled[:8], small_labeled[8:], tiny, lgnn, hyper)
    m2, rows2 = train_hetero(small_labeled[:8], small_labeled[8:], tiny, lgnn, hyper)
    assert rows1 == rows2 or all(
        (a == b) or (a != a and b != b) for r1, r2 in zip(rows1, rows2) for a, b in zip(r1.values(), r2.values()))
    assert min(r["val_L_br"] for r in rows1[1:]) < rows1[0]["val_L_br"]
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(p.data, q.data)
    assert {"val_L_flow", "val_L_cap", "val_L_dangling", "val_L_group", "val_total"} <= set(rows1[-1])


def test_pure_bce_needs_no_lgnn(tiny, small_labeled):
    hyper = HeteroHyper(hidden=8, layers=2, epochs=2, batch=4, seed=0, weights=LossWeights(0.0, 0.0))
    _, rows = train_hetero(small_labeled[:6], small_labeled[6:], tiny, None, hyper)
    assert all(r["val_total"] == r["val_L_br"] for r in rows)

import numpy as np
import pytest

from gridsplit.grid_model import base_instance, perturb_instance
from gridsplit.topo import (as_config, build_hetero_graph, build_line_graph, busbar_components,
                            config_from_choices, random_feasible_config, structural_check,
                            substation_options, to_bus_branch, zone_injections)


def _open(nbg, breakers):
    z = nbg.all_closed()
    z[list(breakers)] = 0
    return z


def test_all_closed_is_one_bus_per_substation(desk):
    bbg = to_bus_branch(desk, desk.all_closed())
    assert bbg.n_buses == desk.n_substations
    assert np.all(bbg.components == 1)
    assert np.array_equal(bbg.bus_sub, np.arange(desk.n_substations))


def test_six_ring_opposite_breakers_gives_two_halves(k4):
    rids = k4.sub_breakers[0]
    assert len(rids) == 6
    z = _open(k4, [rids[0], rids[3]])
    labels = busbar_components(k4, z)[k4.sub_busbars[0]]
    sizes = sorted(np.bincount(labels - labels.min()).tolist())
    assert sizes == [3, 3]
    bbg = to_bus_branch(k4, z)
    assert bbg.components.tolist() == [2, 1, 1, 1]
    assert structural_check(k4, z).feasible


def test_two_busbar_split(triangle):
    z = _open(triangle, triangle.sub_breakers[1])
    bbg = to_bus_branch(triangle, z)
    assert bbg.components.tolist() == [1, 2, 1]
    assert bbg.n_buses == 4
    assert structural_check(triangle, z).feasible  # exempt from the dangling rule


def test_structural_examples(k4):
    assert structural_check(k4, k4.all_closed()).feasible
    rids = k4.sub_breakers[0]
    rep = structural_check(k4, _open(k4, rids[:2]))
    shared = k4.sub_busbars[0][1]  # position 1 touches breakers 0 and 1
    assert rep.dangling_busbars == [shared]
    assert rep.adjacent_open_pairs == [(rids[0], rids[1])]
    assert not rep.feasible
    rep = structural_check(k4, _open(k4, [rids[0], rids[2], rids[4]]))
    assert rep.substations_over_split == [(0, 3)]
    assert not rep.dangling_busbars and not rep.feasible


def test_bus_branch_invariants(desk, desk_inst, rng):
    for _ in range(30):
        z = (rng.random(desk.n_breakers) < 0.8).astype(int)
        bbg = to_bus_branch(desk, z, desk_inst)
        assert bbg.busbar_bus.shape == (desk.n_busbars,)
        assert np.array_equal(bbg.bus_sub[bbg.branches], desk.line_subs)
        # component injections sum back to the substation totals
        S = desk.n_substations
        assert np.allclose(np.bincount(bbg.bus_sub, bbg.bus_gen, S), desk_inst.sub_gen)
        assert np.allclose(np.bincount(bbg.bus_sub, bbg.bus_load, S), desk_inst.sub_load)
        rep = structural_check(desk, z)
        if rep.feasible:
            assert np.all(bbg.components <= 2)


def test_components_monotone_when_opening(desk, rng):
    z = desk.all_closed()
    prev = to_bus_branch(desk, z).components
    for r in rng.permutation(desk.n_breakers):
        z[r] = 0
        cur = to_bus_branch(desk, z).components
        assert np.all(cur >= prev)
        prev = cur


def test_config_validation(desk):
    with pytest.raises(ValueError):
        as_config(desk, np.ones(3))
    with pytest.raises(ValueError):
        as_config(desk, np.full(desk.n_breakers, 2))


def test_line_graph_examples(triangle):
    inst = base_instance(triangle)
    z = triangle.all_closed()
    lg = build_line_graph(to_bus_branch(triangle, z), triangle, inst, 1.0, 1.0)
    assert lg.n_nodes == 6
    # parallel pair 0-1 (lines 0, 1) shares both ends; every line touches every other via a substation
    assert lg.n_edges == 2 * 15
    pg, pd = zone_injections(triangle, inst, 1.0, 1.0)
    assert np.allclose(lg.x[0], [0.05, 1e4, 100.0, -80.0])
    pair = [k for k, (a, b) in enumerate(lg.edge_index) if (a, b) == (0, 1)]
    assert np.allclose(lg.edge_attr[pair[0]], [20.0, 0.0])  # 100 - 80 over both shared buses
    assert np.all(lg.edge_attr[:, 1] == 0)

    zs = _open(triangle, triangle.sub_breakers[1])
    lg2 = build_line_graph(to_bus_branch(triangle, zs), triangle, inst, 1.0, 1.0)
    assert lg2.n_nodes == 6
    edges = {tuple(e): a for e, a in zip(lg2.edge_index.tolist(), lg2.edge_attr.tolist())}
    # lines 0, 1 now reach different busbars of substation 1 and share only intact substation 0
    assert edges[(0, 1)][1] == 0.0
    # lines 0 and 4 (both pair 0) meet on the gen busbar of split substation 1
    assert edges[(0, 4)][1] == 1.0
    # line 0 and line 5 touch different halves of substation 1 and nothing else
    assert (0, 5) not in edges


def test_line_graph_no_edge_without_shared_component(k4):
    inst = base_instance(k4)
    lg = build_line_graph(to_bus_branch(k4, k4.all_closed()), k4, inst, 0.5, 0.5)
    subs = k4.line_subs
    linked = {tuple(e) for e in lg.edge_index}
    for a in range(k4.n_lines):
        for b in range(k4.n_lines):
            if a != b:
                assert ((a, b) in linked) == bool(set(subs[a]) & set(subs[b]))


def test_line_graph_size_fixed(desk, desk_inst, rng):
    for _ in range(5):
        z = random_feasible_config(desk, rng, 0.5)
        lg = build_line_graph(to_bus_branch(desk, z), desk, desk_inst, 0.5, 0.5)
        assert lg.x.shape == (desk.n_lines, 4)
        assert lg.edge_attr.shape == (lg.n_edges, 2)


def test_hetero_graph_features(k4):
    inst = base_instance(k4)
    hg = build_hetero_graph(k4, k4.all_closed(), inst)
    assert hg.x.shape[1] == 4 and hg.br_attr.shape[1] == 3 and hg.line_attr.shape[1] == 2
    # ring busbars carry one line and two breakers
    assert np.all(hg.x[:, 2] == 1) and np.all(hg.x[:, 3] == 3)
    assert np.all(hg.br_attr[:, 0] == 1)
    assert np.all(hg.br_attr[:, 1] == 2) and np.all(hg.br_attr[:, 2] == 2)
    z = _open(k4, [k4.sub_breakers[0][0]])
    hg = build_hetero_graph(k4, z, inst)
    r1 = k4.sub_breakers[0][1]  # its left busbar lost the closed neighbour
    assert hg.br_attr[r1].tolist() == [1.0, 1.0, 2.0]


def test_hetero_graph_two_busbar(triangle):
    hg = build_hetero_graph(triangle, triangle.all_closed(), base_instance(triangle))
    # one breaker and two lines per busbar (one to each neighbour)
    assert hg.x[0, 2] == 2 and hg.x[0, 3] == 3
    assert hg.br_attr[0].tolist() == [1.0, 2.0, 2.0]


def test_substation_options_are_exactly_the_legal_splits(k4):
    rids = k4.sub_breakers[0]
    opts = substation_options(k4, 0)
    assert opts[0] == ()
    assert len(opts) == 1 + 9  # non-adjacent pairs on a 6-cycle
    import itertools
    legal = []
    for a, b in itertools.combinations(rids, 2):
        rep = structural_check(k4, _open(k4, [a, b]))
        if rep.feasible:
            legal.append((a, b))
    assert sorted(opts[1:]) == sorted(legal)


def test_random_feasible_configs(desk, rng):
    for _ in range(50):
        assert structural_check(desk, random_feasible_config(desk, rng, 0.6)).feasible
    assert np.array_equal(config_from_choices(desk, []), desk.all_closed())


def test_perturbed_all_closed_feasible(desk):
    for seed in range(5):
        perturb_instance(desk, seed)
        assert structural_check(desk, desk.all_closed()).feasible

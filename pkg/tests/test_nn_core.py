import numpy as np
import pytest

from gridsplit.nn import (MLP, Adam, AdamState, GRUCell, Linear, NonFiniteValue, NonScalarLoss, ShapeMismatch,
                          Tensor, adam_step, concat, gather, gru_cell, mlp_forward, numerical_grad, padded_prod,
                          segment_sum, straight_through, where)
from gridsplit.nn.checkpoint import checkpoint_dict, load_params, read_checkpoint, save_checkpoint


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


def test_square_and_product():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)
    x, y = Tensor(2.0, requires_grad=True), Tensor(5.0, requires_grad=True)
    (x * y).backward()
    assert (x.grad, y.grad) == (pytest.approx(5.0), pytest.approx(2.0))


def test_backward_guards():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(NonScalarLoss):
        (x * 2).backward()
    with pytest.raises(NonFiniteValue):
        (x.log() * 0 + Tensor(np.inf)).sum().backward()


def test_gradient_accumulates_over_shared_nodes():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y * 3).backward()  # 4 x^2
    assert x.grad == pytest.approx(16.0)


def test_three_layer_mlp_finite_differences(rng):
    l1, l2, l3 = Linear(5, 7, rng), Linear(7, 6, rng), Linear(6, 1, rng)
    x = Tensor(rng.normal(size=(4, 5)))
    f = lambda: (l3(l2(l1(x).tanh()).sigmoid()) ** 2).sum()
    for p in (l1.W, l2.b, l3.W, l1.b):
        p.grad = None
    f().backward()
    for p in (l1.W, l2.b, l3.W):
        assert _rel_err(p.grad, numerical_grad(f, p)) <= 1e-4


def test_ops_finite_differences(rng):
    x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    idx = np.array([0, 2, 2, 5, 1])
    seg = np.array([0, 1, 1, 3, 3, 3])
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    cases = [
        lambda: (gather(x, idx) @ w).exp().sum(),
        lambda: segment_sum(x.relu() + 0.1, seg, 4).square().sum(),
        lambda: concat([x, x * 2.0], axis=1).abs().mean(),
        lambda: where(x.data > 0, x, x * 3.0).sum(),
        lambda: (x.clip(-0.5, 0.5) / (x.square() + 1.0)).sum(),
        lambda: x[1:4].T.reshape(-1).sum() + (x.square() + 1.0).log().sum(),
    ]
    for f in cases:
        x.grad, w.grad = None, None
        f().backward()
        assert _rel_err(x.grad, numerical_grad(f, x)) <= 1e-4


def test_padded_prod_with_zeros(rng):
    vals = rng.uniform(0.2, 0.9, size=5)
    vals[2] = 0.0
    x = Tensor(vals, requires_grad=True)
    index = np.array([[0, 2, -1], [1, 3, 4], [-1, -1, -1]])
    out = padded_prod(x, index)
    assert np.allclose(out.data, [0.0, vals[1] * vals[3] * vals[4], 1.0])
    f = lambda: (padded_prod(x, index) * np.array([1.0, 2.0, 3.0])).sum()
    x.grad = None
    f().backward()
    assert np.allclose(x.grad, numerical_grad(f, x), atol=1e-8)
    assert x.grad[2] == pytest.approx(vals[0])  # d(x0 x2)/dx2 even at x2 = 0


def test_straight_through():
    soft = Tensor([0.3, 0.8], requires_grad=True)
    hard = straight_through((soft.data >= 0.5).astype(float), soft)
    assert hard.data.tolist() == [0.0, 1.0]
    (hard * np.array([2.0, 5.0])).sum().backward()
    assert soft.grad.tolist() == [2.0, 5.0]


def test_mlp_examples(rng):
    m = MLP(3, 4, 2, rng)
    for p in m.parameters():
        p.data[...] = 0.0
    m.l2.b.data[...] = [1.5, -2.0]
    assert np.allclose(mlp_forward(m, rng.normal(size=(5, 3))).data, [[1.5, -2.0]] * 5)
    one = MLP(1, 1, 1, rng)
    one.l1.W.data[...] = 2.0
    one.l2.W.data[...] = 3.0
    one.l1.b.data[...] = one.l2.b.data[...] = 0.0
    assert mlp_forward(one, [[1.0]]).item() == pytest.approx(6.0)
    assert mlp_forward(one, [[-1.0]]).item() == 0.0  # clipped by the ReLU
    with pytest.raises(ShapeMismatch):
        mlp_forward(m, np.zeros((2, 4)))


def test_gru_examples(rng):
    g = GRUCell(3, 4, rng)
    for p in g.parameters():
        p.data[...] = 0.0
    assert np.allclose(gru_cell(g, np.zeros((2, 3)), np.zeros((2, 4))).data, 0.0)
    g = GRUCell(3, 4, rng)
    m, h = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    out = gru_cell(g, m, h).data
    u = 1 / (1 + np.exp(-(m @ g.Wu.data + h @ g.Uu.data + g.bu.data)))
    cand = (out - u * h) / (1 - u)
    assert np.all(np.abs(cand) <= 1 + 1e-12)  # out lies between h and a tanh candidate
    mt, ht = Tensor(m, requires_grad=True), Tensor(h, requires_grad=True)
    f = lambda: (g(mt, ht) ** 2).sum()
    f().backward()
    for t in (mt, ht, g.Un, g.Wr, g.cn):
        assert _rel_err(t.grad, numerical_grad(f, t)) <= 1e-4
    with pytest.raises(ShapeMismatch):
        gru_cell(g, np.zeros((2, 4)), np.zeros((2, 4)))


def test_adam_first_step_and_zero_gradient():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    adam_step(AdamState(), [p], [np.array([0.7, -40.0, 1e-3])], lr=1e-3)
    assert np.allclose(p.data, [1.0 - 1e-3, -2.0 + 1e-3, 3.0 - 1e-3], atol=1e-7)
    before = p.data.copy()
    adam_step(AdamState(), [p], [np.zeros(3)], lr=1e-3)
    assert np.array_equal(p.data, before)
    with pytest.raises(ShapeMismatch):
        adam_step(AdamState(), [p], [np.zeros(2)], lr=1e-3)


def test_adam_converges_on_quadratic():
    # from x0 = 1 the decaying step size stalls near 0.02 after 2000 steps; 0.5 converges
    x = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam([x], lr=1e-3)
    for _ in range(2000):
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
    assert abs(x.data[0]) < 1e-3


def test_forward_is_deterministic(rng):
    m = MLP(4, 8, 2, rng)
    x = rng.normal(size=(3, 4))
    assert np.array_equal(m(Tensor(x)).data, m(Tensor(x)).data)


def test_checkpoint_round_trip_and_param_count(tmp_path):
    from gridsplit.lgnn import LgnnModel

    d = 64
    model = LgnnModel(hidden=d, layers=3, seed=4)
    mlp = lambda i, h, o: i * h + h + h * o + o
    expected = (4 * d + d) + 3 * (mlp(2 * d + 2, d, d) + mlp(2 * d, d, d)) + (d + 1)
    assert model.n_parameters() == expected
    ckpt = checkpoint_dict(model, "lgnn", {"hidden": d, "layers": 3}, 4)
    assert ckpt["n_params"] == expected
    save_checkpoint(tmp_path / "m" / "ckpt.json", ckpt)
    other = LgnnModel(hidden=d, layers=3, seed=99)
    load_params(other, read_checkpoint(tmp_path / "m" / "ckpt.json"))
    for a, b in zip(model.parameters(), other.parameters()):
        assert np.array_equal(a.data, b.data)
    with pytest.raises(ValueError):
        load_params(LgnnModel(hidden=8, layers=3, seed=0), ckpt)


def test_adam_matches_torch(rng):
    torch = pytest.importorskip("torch")
    w0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(5)]
    p = Tensor(w0.copy(), requires_grad=True)
    tp = torch.tensor(w0.copy(), requires_grad=True)
    topt = torch.optim.Adam([tp], lr=1e-2)
    state = AdamState()
    for g in grads:
        adam_step(state, [p], [g], lr=1e-2)
        tp.grad = torch.tensor(g)
        topt.step()
    assert np.allclose(p.data, tp.detach().numpy(), atol=1e-12)

import numpy as np
import pytest

from shillab import numcore as nc
from shillab.encoder import (Adjacency, MaskError, embed, forward_all, forward_rows, gcn_layer,
                             generate_fake_features, init_encoder, make_mask, mask_batches, recon_loss,
                             reconstruct, train_encoder)
from shillab.features import compute_all, normalize
from shillab.graphdata import RatingGraph

from conftest import small_graph


def _state(seed=0, d=8, dropout=0.5):
    return init_encoder(np.random.default_rng(seed), hidden_size=d, dropout=dropout)


def test_embed_zero_and_deterministic():
    s = _state()
    assert np.array_equal(embed(s, np.zeros((1, 10))).value, np.zeros((1, 8)))
    x = np.random.default_rng(1).random((1, 10))
    assert embed(_state(), x).value.tobytes() == embed(_state(), x).value.tobytes()


def test_embed_gradient():
    s = _state()
    x = np.random.default_rng(1).random((1, 10))
    p = s.params
    assert nc.check_gradients(lambda: nc.sum(nc.square(embed(s, x))), [p["embed1"]]) <= 1e-4


def test_isolated_node_aggregates_to_zero():
    g = RatingGraph([0], [0], [4], 2, 2)  # user 1 and item 1 have no edges
    s = _state()
    adj = Adjacency.from_graph(g)
    rng = np.random.default_rng(0)
    Hu, Hi = gcn_layer(s, adj, nc.const(rng.random((2, 8))), nc.const(rng.random((2, 8))))
    assert np.array_equal(Hu.value[1], np.zeros(8)) and np.array_equal(Hi.value[1], np.zeros(8))


def test_g0_normalisation_by_hand(g0):
    s = _state()
    d = 8
    s.params["rel_item_user"] = nc.param(np.eye(d))
    s.params["hidden"] = nc.param(np.eye(d))
    c = np.arange(1, d + 1, dtype=float)
    adj = Adjacency.from_graph(g0)
    Hu, _ = gcn_layer(s, adj, nc.const(np.tile(c, (3, 1))), nc.const(np.tile(c, (3, 1))))
    # u1 rated i1 (3 raters) and i2 (2 raters); u1 has 2 items
    want = c * (1 / np.sqrt(2 * 3) + 1 / np.sqrt(2 * 2))
    assert np.allclose(Hu.value[0], want)


def test_aggregation_is_linear(small):
    adj = Adjacency.from_graph(small)
    Pi = np.random.default_rng(0).normal(size=(small.n_items, 8))
    q1 = nc.spmatmul(adj.A, nc.const(Pi)).value
    q2 = nc.spmatmul(adj.A, nc.const(2 * Pi)).value
    assert np.allclose(q2, 2 * q1)


def test_reconstruct_contracts():
    s = _state(d=13)
    assert np.array_equal(reconstruct(s, nc.const(np.zeros((1, 13)))).value, np.zeros((1, 10)))
    assert reconstruct(s, nc.const(np.ones((4, 13)))).shape == (4, 10)
    h = nc.const(np.random.default_rng(0).normal(size=(3, 13)))
    assert nc.check_gradients(lambda: nc.sum(nc.square(reconstruct(s, h))),
                              [s.params["rec1"], s.params["rec2"]]) <= 1e-4


def test_make_mask():
    plan = make_mask(60, 40, 0.10, np.random.default_rng(0))
    assert plan.users.size + plan.items.size == 10
    assert plan.users.max(initial=-1) < 60 and plan.items.max(initial=-1) < 40
    again = make_mask(60, 40, 0.10, np.random.default_rng(0))
    assert np.array_equal(plan.users, again.users) and np.array_equal(plan.items, again.items)
    with pytest.raises(MaskError):
        make_mask(5, 4, 0.01, np.random.default_rng(0))


def test_recon_loss_examples():
    x = np.random.default_rng(0).random((3, 10))
    assert float(recon_loss(x, nc.const(x), None, None).value) == 0.0
    e = np.zeros((1, 10))
    e[0, 0] = 1.0
    assert float(recon_loss(e, nc.const(np.zeros((1, 10))), None, None).value) == 1.0
    with pytest.raises(MaskError):
        recon_loss(None, None, None, None)


def test_recon_loss_direct_sum():
    rng = np.random.default_rng(4)
    tu, pu, ti, pi = (rng.random((n, 10)) for n in (12, 12, 8, 8))
    got = float(recon_loss(tu, nc.const(pu), ti, nc.const(pi)).value)
    want = sum(np.sum((pu[k] - tu[k]) ** 2) for k in range(12)) / 12 \
        + sum(np.sum((pi[k] - ti[k]) ** 2) for k in range(8)) / 8
    assert abs(got - want) <= 1e-12


def test_fake_features():
    g = small_graph(1)
    adj = Adjacency.from_graph(g)
    Xi = np.random.default_rng(0).random((g.n_items, 10))
    zero = init_encoder(np.random.default_rng(0), 8, zero=True)
    assert np.array_equal(generate_fake_features(zero, adj, Xi, 3).value, np.zeros((1, 10)))
    s = _state()
    assert generate_fake_features(s, adj, Xi, 3).shape == (1, 10)
    a = generate_fake_features(s, adj, Xi, 3, seed_edge=False).value
    b = generate_fake_features(s, adj, Xi * 7, 5, seed_edge=False).value
    assert np.array_equal(a, b)
    assert not np.array_equal(generate_fake_features(s, adj, Xi, 3).value, a)
    with pytest.raises(KeyError):
        generate_fake_features(s, adj, Xi, g.n_items)


def test_full_forward_gradient_on_ten_nodes():
    g = small_graph(2, n_users=5, n_items=5, density=0.4)
    s = _state(d=6)
    adj = Adjacency.from_graph(g)
    rng = np.random.default_rng(0)
    Xu, Xi = rng.random((5, 10)), rng.random((5, 10))
    plan = make_mask(5, 5, 0.4, rng)
    Xu_in, Xi_in = plan.apply(Xu, Xi)

    def loss():
        pu, pi = forward_all(s, adj, Xu_in, Xi_in)
        return recon_loss(Xu[plan.users], nc.gather(pu, plan.users) if plan.users.size else None,
                          Xi[plan.items], nc.gather(pi, plan.items) if plan.items.size else None)

    assert nc.check_gradients(loss, s.leaves()) <= 1e-4


def test_forward_rows_matches_forward_all(small):
    s = _state()
    adj = Adjacency.from_graph(small)
    rng = np.random.default_rng(0)
    Xu, Xi = rng.random((small.n_users, 10)), rng.random((small.n_items, 10))
    fu, fi = forward_all(s, adj, Xu, Xi)
    users, items = np.array([0, 4, 7]), np.array([1, 2])
    ru, ri = forward_rows(s, adj, Xu, Xi, users, items)
    assert np.allclose(ru.value, fu.value[users]) and np.allclose(ri.value, fi.value[items])


def test_masked_truth_does_not_leak(small):
    s = _state()
    adj = Adjacency.from_graph(small)
    rng = np.random.default_rng(0)
    Xu, Xi = rng.random((small.n_users, 10)), rng.random((small.n_items, 10))
    plan = make_mask(small.n_users, small.n_items, 0.2, rng)
    a = forward_rows(s, adj, *plan.apply(Xu, Xi), plan.users, plan.items)
    Xu2, Xi2 = Xu.copy(), Xi.copy()
    Xu2[plan.users] = 99.0
    Xi2[plan.items] = -99.0
    b = forward_rows(s, adj, *plan.apply(Xu2, Xi2), plan.users, plan.items)
    for x, y in zip(a, b):
        if x is not None:
            assert np.array_equal(x.value, y.value)


def test_mask_batches_cover_plan():
    plan = make_mask(50, 30, 0.5, np.random.default_rng(0))
    seen_u, seen_i = [], []
    for bu, bi in mask_batches(plan, 50, 32, np.random.default_rng(1)):
        assert bu.size + bi.size <= 32
        seen_u += bu.tolist()
        seen_i += bi.tolist()
    assert sorted(seen_u) == plan.users.tolist() and sorted(seen_i) == plan.items.tolist()


def test_training_halves_recon_loss():
    g = small_graph(3, n_users=60, n_items=40, density=0.15)
    rng = np.random.default_rng(0)
    Xu_raw, Xi_raw = compute_all(g, rng)
    Xu, _ = normalize(Xu_raw)
    Xi, _ = normalize(Xi_raw)
    s = init_encoder(rng)
    hist = train_encoder(s, g, Xu, Xi, rng, epochs=64, batch_size=32)
    assert hist[-1] <= 0.5 * hist[0]

from fractions import Fraction

import numpy as np
import pytest

from shillab import numcore as nc
from shillab.graphdata import RatingGraph
from shillab.influence import (conjugate_gradient, edge_influence, hvp, hvp_solve, influence_score,
                               influence_scores, init_ip, predict_influence,
                               read_influence_cache, standardize, train_ip, train_surrogate,
                               write_influence_cache)

from oracles import dense_graph, exact_spearman, loo_change


def grad_rs(model, U, V):
    e = model.ratings - np.einsum("ij,ij->i", U[model.users], V[model.items])
    gU = np.zeros_like(U)
    gV = np.zeros_like(V)
    np.add.at(gU, model.users, -2 * e[:, None] * V[model.items])
    np.add.at(gV, model.items, -2 * e[:, None] * U[model.users])
    return np.concatenate([(gU + 2 * model.reg * U).ravel(), (gV + 2 * model.reg * V).ravel()])


def test_rank_one_is_realisable():
    a = np.array([1.0, 1.5, 2.0, 1.2])
    b = np.array([1.0, 2.0, 2.2, 1.4, 1.1])
    u, i = np.meshgrid(np.arange(4), np.arange(5), indexing="ij")
    g = RatingGraph(u.ravel(), i.ravel(), np.outer(a, b).ravel(), 4, 5)
    m = train_surrogate(g, rank=1, reg=1e-9, epochs=500, tol=0)
    assert m.rmse <= 1e-3


def test_huge_ridge_shrinks_factors():
    m = train_surrogate(dense_graph(0), rank=2, reg=1e9)
    assert np.abs(m.U).max() < 1e-6 and np.abs(m.V).max() < 1e-6


def test_als_loss_monotone():
    m = train_surrogate(dense_graph(1), rank=2, reg=0.5, epochs=50, tol=0)
    h = np.array(m.history)
    assert np.all(np.diff(h) <= 1e-9 * h[:-1])


def test_rank_too_large():
    with pytest.raises(ValueError):
        train_surrogate(dense_graph(0), rank=6)


def test_hvp_matches_gradient_differences():
    g = dense_graph(2)
    m = train_surrogate(g, rank=2)
    v = np.random.default_rng(0).normal(size=m.theta().size)
    h = 1e-6
    Up, Vp = m.split(m.theta() + h * v)
    Um, Vm = m.split(m.theta() - h * v)
    fd = (grad_rs(m, Up, Vp) - grad_rs(m, Um, Vm)) / (2 * h)
    assert np.allclose(hvp(m, v), fd, atol=1e-5)


def test_cg_zero_and_diagonal():
    x, it, _ = conjugate_gradient(lambda p: 2 * p, np.zeros(4), 0.01)
    assert np.array_equal(x, np.zeros(4)) and it == 0
    v = np.array([1.0, -2.0, 3.0])
    x, _, _ = conjugate_gradient(lambda p: 2 * p, v, 1e-12)
    assert np.allclose(x, v / 2)
    with pytest.raises(nc.NumericError):
        conjugate_gradient(lambda p: p, np.array([np.nan]), 0.01)
    with pytest.raises(ValueError):
        conjugate_gradient(lambda p: p, np.ones(2), 0.0)


def test_cg_matches_dense_inverse():
    m = train_surrogate(dense_graph(3), rank=2)
    n = m.theta().size
    H = np.stack([hvp(m, e) for e in np.eye(n)], axis=1)
    v = np.random.default_rng(1).normal(size=n)
    want = np.linalg.solve(H + 0.01 * np.eye(n), v)
    assert np.max(np.abs(hvp_solve(m, v, 0.01) - want)) <= 1e-5


def test_realisable_user_scores_zero():
    a = np.array([1.0, 1.5, 2.0, 1.2, 1.8])
    b = np.array([1.0, 2.0, 2.2, 1.4, 1.1])
    u, i = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
    g = RatingGraph(u.ravel(), i.ravel(), np.outer(a, b).ravel(), 5, 5)
    m = train_surrogate(g, rank=1, reg=1e-9, epochs=2000, tol=0)
    assert np.allclose(influence_scores(m, g, 0), 0.0, atol=1e-4)


def test_duplicate_profiles_score_alike():
    g0 = dense_graph(4)
    u = np.r_[g0.users, np.full(5, 5)]
    i = np.r_[g0.items, np.arange(5)]
    r = np.r_[g0.ratings, g0.ratings[g0.users == 2]]
    g = RatingGraph(u, i, r, 6, 5)
    s = influence_scores(train_surrogate(g, rank=2), g, 1)
    assert s[2] == pytest.approx(s[5], rel=1e-6, abs=1e-9)


def test_profile_split_additivity():
    g = dense_graph(5)
    m = train_surrogate(g, rank=2)
    per = edge_influence(m, 3)
    whole = influence_score(m, g, 1, 3)
    rows = np.flatnonzero(g.users == 1)
    assert per[rows[:2]].sum() + per[rows[2:]].sum() == pytest.approx(whole, rel=1e-12)


def test_empty_profile_raises():
    g = RatingGraph([0, 1], [0, 1], [3, 4], 3, 2)
    m = train_surrogate(g, rank=1)
    with pytest.raises(ValueError):
        influence_score(m, g, 2, 0)


def test_leave_one_out_rank_agreement():
    rhos = []
    for seed in range(10):
        g = dense_graph(100 + seed)
        m = train_surrogate(g, rank=2, reg=1.0, epochs=2000, tol=1e-14)
        scores = influence_scores(m, g, 0)
        actual = [loo_change(g, m, z, 0) for z in range(5)]
        rhos.append(exact_spearman(scores, actual))
    assert all(r > 0 for r in rhos)
    assert sum(rhos) / len(rhos) >= Fraction(4, 5)


def test_standardize():
    y, mu, sd = standardize(np.random.default_rng(0).normal(3, 7, 500))
    assert abs(y.mean()) <= 1e-9 and abs(y.var() - 1) <= 1e-6
    y, _, sd = standardize(np.full(5, 2.0))
    assert sd == 1.0 and np.all(y == 0)


def test_cache_roundtrip(tmp_path):
    raw = np.array([0.1, -2.5, 1e-20])
    write_influence_cache(tmp_path / "c.csv", ["a", "b", "c"], raw, standardize(raw)[0])
    ids, r, s = read_influence_cache(tmp_path / "c.csv")
    assert ids == ["a", "b", "c"] and np.array_equal(r, raw)


def test_ip_zero_and_deterministic():
    ip = init_ip(np.random.default_rng(0), zero=True)
    assert np.all(predict_influence(ip, np.random.default_rng(1).random((4, 10))).value == 0)
    ip = init_ip(np.random.default_rng(0))
    x = np.random.default_rng(1).random((1, 10))
    assert predict_influence(ip, x).value.tobytes() == predict_influence(ip, x).value.tobytes()


def test_ip_input_gradient():
    ip = init_ip(np.random.default_rng(0))
    x = nc.param(np.random.default_rng(1).random((1, 10)))
    assert nc.check_gradients(lambda: nc.sum(predict_influence(ip, x)), [x]) <= 1e-4


def test_train_ip_needs_ten_users():
    with pytest.raises(ValueError):
        train_ip(np.zeros((9, 10)), np.zeros(9), np.random.default_rng(0))


def test_train_ip_constant_targets():
    rng = np.random.default_rng(0)
    ip = train_ip(rng.random((1000, 10)), np.full(1000, 4.2), rng)
    assert ip.history[-1] <= 1e-4


def _ip_data(seed=0, n=400):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 10))
    y = np.sin(3 * X[:, 0]) + X[:, 1] * X[:, 2] + 0.05 * rng.normal(size=n)
    return X, y


def test_train_ip_shuffled_control():
    X, y = _ip_data()
    real = train_ip(X, y, np.random.default_rng(1)).history[-1]
    fake = train_ip(X, np.random.default_rng(2).permutation(y), np.random.default_rng(1)).history[-1]
    assert fake >= real


def test_train_ip_mse_trace():
    X, y = _ip_data(3)
    h = train_ip(X, y, np.random.default_rng(0)).history
    assert all(b <= 1.05 * a for a, b in zip(h, h[1:]))

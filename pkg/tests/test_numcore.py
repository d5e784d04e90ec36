import math

import numpy as np
import pytest

from shillab import numcore as nc


def test_matmul_identity():
    out = nc.matmul(nc.const(np.eye(2)), nc.const([[3.0], [4.0]]))
    assert np.array_equal(nc.eval(out), [[3.0], [4.0]])


def test_leaky_relu_slope():
    assert float(nc.leaky_relu(nc.const(-1.0), 0.1).value) == pytest.approx(-0.1)


def test_softmax_uniform():
    assert np.allclose(nc.softmax(nc.const([0.0, 0.0, 0.0]), axis=0).value, [1 / 3] * 3)


def test_shape_mismatch_names_op():
    with pytest.raises(nc.DimensionError, match="matmul"):
        nc.matmul(nc.const(np.ones((2, 3))), nc.const(np.ones((2, 3))))
    with pytest.raises(nc.DimensionError, match="add"):
        nc.add(nc.const(np.ones((2, 3))), nc.const(np.ones((3, 2))))


def test_row_and_column_broadcast_allowed():
    m = nc.const(np.ones((3, 4)))
    assert nc.add(m, nc.const(np.ones((1, 4)))).shape == (3, 4)
    assert nc.mul(m, nc.const(np.ones((3, 1)))).shape == (3, 4)


def test_grad_square():
    x = nc.param(3.0)
    (g,) = nc.grad(nc.square(x), [x])
    assert float(g) == pytest.approx(6.0)


def test_grad_of_constant_is_zero():
    x = nc.param(np.ones(3))
    (g,) = nc.grad(nc.sum(nc.const(np.ones(3))), [x])
    assert np.array_equal(g, np.zeros(3))


def test_grad_requires_scalar_root():
    x = nc.param(np.ones(3))
    with pytest.raises(nc.ContractError):
        nc.grad(nc.mul(x, 2.0), [x])


def test_mlp_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    x = nc.const(rng.random((1, 10)))
    W1 = nc.param(rng.normal(size=(10, 8)))
    W2 = nc.param(rng.normal(size=(8, 1)))

    def f():
        return nc.sum(nc.square(nc.leaky_relu(x @ W1, 0.1) @ W2))

    assert nc.check_gradients(f, [W1, W2]) <= 1e-4


PRIMITIVES = {
    "add": lambda a, b: nc.add(a, b),
    "sub": lambda a, b: nc.sub(a, b),
    "mul": lambda a, b: nc.mul(a, b),
    "div": lambda a, b: nc.div(a, nc.add(nc.square(b), 1.0)),
    "matmul": lambda a, b: nc.matmul(a, nc.transpose(b)),
    "leaky_relu": lambda a, b: nc.leaky_relu(a, 0.1),
    "exp": lambda a, b: nc.exp(a),
    "log": lambda a, b: nc.log(nc.add(nc.square(a), 1.0)),
    "sqrt": lambda a, b: nc.sqrt(nc.add(nc.square(a), 1.0)),
    "absolute": lambda a, b: nc.absolute(a),
    "softmax": lambda a, b: nc.softmax(a, axis=1),
    "logsumexp": lambda a, b: nc.logsumexp(a, axis=1),
    "mean": lambda a, b: nc.mean(a),
    "cosine": lambda a, b: nc.cosine_similarity(a, b),
    "gather": lambda a, b: nc.gather(a, [2, 0, 2]),
    "solve": lambda a, b: nc.solve(nc.add(nc.matmul(a, nc.transpose(a)), nc.const(3 * np.eye(3))), b),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_over_seeds(name):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = nc.param(rng.normal(size=(3, 4)))
        b = nc.param(rng.normal(size=(3, 4)))
        w = nc.const(rng.normal(size=PRIMITIVES[name](a, b).shape))
        worst = max(worst, nc.check_gradients(lambda: nc.sum(nc.mul(PRIMITIVES[name](a, b), w)), [a, b]))
    assert worst <= 1e-4


def test_eval_is_deterministic():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(5, 5))
    v1 = nc.softmax(nc.const(A) @ nc.const(A), axis=1).value
    v2 = nc.softmax(nc.const(A) @ nc.const(A), axis=1).value
    assert v1.tobytes() == v2.tobytes()


def test_clip_global_norm_examples():
    out = nc.clip_global_norm([np.array([3.0, 4.0])], 1.0)
    assert np.allclose(out[0], [0.6, 0.8])
    g = [np.array([0.3, 0.4])]
    assert nc.clip_global_norm(g, 1.0)[0] is g[0]
    z = nc.clip_global_norm([np.zeros(3)], 1.0)
    assert np.array_equal(z[0], np.zeros(3))


def test_clip_bound_holds():
    rng = np.random.default_rng(0)
    for _ in range(200):
        gs = [rng.normal(scale=rng.uniform(0, 10), size=s) for s in [(3,), (2, 2)]]
        out = nc.clip_global_norm(gs, 1.0)
        assert math.sqrt(sum(float(np.sum(g * g)) for g in out)) <= 1.0 + 1e-12


def test_cosine_schedule_endpoints():
    assert nc.cosine_rate(5e-4, 0.0) == pytest.approx(5e-4)
    assert nc.cosine_rate(5e-4, 1.0) == pytest.approx(0.0, abs=1e-20)


def test_adam_step_descends():
    w = nc.param(1.0)
    state = nc.AdamState()
    (g,) = nc.grad(nc.square(w), [w])
    nc.adam_step([w], [g], state, 5e-4, 0.0)
    assert float(w.value) < 1.0


def test_adam_rejects_nan():
    w = nc.param(1.0)
    with pytest.raises(nc.NumericError):
        nc.adam_step([w], [np.array(np.nan)], nc.AdamState(), 1e-3, 0.0)
    assert float(w.value) == 1.0

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetfed.losses import ce_loss_grad
from hetfed.nn import (ConfigError, ModelParams, OptimizerState, backward, finite_diff_gradient,
                       flatten, forward, from_layers, init_mlp, load_params, n_params,
                       optimizer_step, save_params, unflatten)

from .oracles import documented_index_map, max_rel_err, straight_line_forward


def test_init_is_deterministic():
    a = init_mlp([2, 3], seed=7)
    b = init_mlp([2, 3], seed=7)
    assert a.flat.tobytes() == b.flat.tobytes()
    assert not np.array_equal(a.flat, init_mlp([2, 3], seed=8).flat)


def test_init_shapes_and_biases():
    p = init_mlp([4, 8, 3], seed=0)
    assert flatten(p).size == 4 * 8 + 8 + 8 * 3 + 3 == 67
    for (w, b), fan_in in zip(p.layers, [4, 8]):
        assert np.all(b == 0)
        assert np.all(np.abs(w) <= np.sqrt(6 / fan_in))


@pytest.mark.parametrize("dims", [[2], [], [3, 0, 2], [0, 2]])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ConfigError):
        init_mlp(dims, seed=0)


def test_forward_zero_and_identity():
    zero = ModelParams((3, 4, 2), np.zeros(n_params([3, 4, 2])))
    logits, _ = forward(zero, np.ones((5, 3)))
    assert np.all(logits == 0)
    ident = from_layers([(np.eye(2), np.zeros(2))])
    logits, _ = forward(ident, np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(logits, [[1.0, 2.0]])


def test_forward_matches_straight_line_evaluator():
    rng = np.random.default_rng(3)
    p = init_mlp([5, 7, 6, 3], seed=11).with_flat(rng.standard_normal(n_params([5, 7, 6, 3])))
    x = rng.standard_normal((9, 5))
    logits, _ = forward(p, x)
    layers = [(w.tolist(), b.tolist()) for w, b in p.layers]
    np.testing.assert_allclose(logits, straight_line_forward(layers, x), rtol=0, atol=1e-12)


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        forward(init_mlp([3, 2], 0), np.ones((2, 4)))


def test_backward_zero_dlogits():
    p = init_mlp([3, 5, 2], 1)
    _, cache = forward(p, np.ones((4, 3)))
    assert not np.any(backward(p, cache, np.zeros((4, 2))))


def test_backward_single_layer_outer_product():
    p = init_mlp([3, 2], 4)
    x = np.array([[0.5, -1.0, 2.0]])
    d = np.array([[0.3, -0.7]])
    _, cache = forward(p, x)
    g = backward(p, cache, d)
    np.testing.assert_allclose(g[:6].reshape(2, 3), np.outer(d[0], x[0]), atol=1e-15)
    np.testing.assert_allclose(g[6:], d[0], atol=1e-15)


def test_backward_cache_mismatch():
    p = init_mlp([3, 4, 2], 0)
    _, cache = forward(p, np.ones((2, 3)))
    with pytest.raises(ValueError):
        backward(init_mlp([3, 5, 2], 0), cache, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        backward(p, cache, np.zeros((3, 2)))


@pytest.mark.parametrize("dims", [[4, 6, 5, 3], [16, 32, 16, 10]])
def test_backward_matches_finite_differences(dims):
    rng = np.random.default_rng(sum(dims))
    p = init_mlp(dims, seed=5)
    x = rng.standard_normal((6, dims[0]))
    y = rng.integers(0, dims[-1], size=6)

    def loss(m):
        return ce_loss_grad(forward(m, x)[0], y)[0]

    logits, cache = forward(p, x)
    analytic = backward(p, cache, ce_loss_grad(logits, y)[1])
    numeric = finite_diff_gradient(loss, p, h=1e-5)
    assert max_rel_err(analytic, numeric) < 1e-4


def test_finite_diff_simple_losses():
    theta = np.array([0.3, -1.2, 2.5])
    np.testing.assert_allclose(finite_diff_gradient(lambda t: 0.5 * t @ t, theta, 1e-4), theta, atol=1e-8)
    c = np.array([1.5, -2.0, 0.25])
    np.testing.assert_allclose(finite_diff_gradient(lambda t: c @ t, theta, 1e-3), c, atol=1e-12)
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda t: 0.0, theta, 0.0)


def test_flatten_layout_follows_documented_map():
    dims = [3, 4, 2]
    p = unflatten(np.arange(n_params(dims), dtype=float), dims)
    layers = p.layers
    for idx, (k, kind, r, c) in enumerate(documented_index_map(dims)):
        w, b = layers[k]
        assert (w[r, c] if kind == "W" else b[r]) == idx
    perm = np.random.default_rng(0).permutation(n_params(dims)).astype(float)
    q = unflatten(perm, dims)
    for idx, (k, kind, r, c) in enumerate(documented_index_map(dims)):
        w, b = q.layers[k]
        assert (w[r, c] if kind == "W" else b[r]) == perm[idx]
    assert np.array_equal(flatten(q), perm)


def test_flatten_small_and_errors():
    assert flatten(init_mlp([2, 2], 0)).size == 6
    with pytest.raises(ValueError):
        unflatten(np.zeros(5), [2, 2])


@settings(max_examples=1000, deadline=None)
@given(dims=st.lists(st.integers(1, 6), min_size=2, max_size=4), seed=st.integers(0, 2**32 - 1))
def test_flatten_roundtrip_property(dims, seed):
    p = init_mlp(dims, seed)
    rng = np.random.default_rng(seed)
    p = p.with_flat(rng.standard_normal(p.size))
    q = unflatten(flatten(p), dims)
    assert q.flat.tobytes() == p.flat.tobytes()
    assert q.layer_dims == p.layer_dims


def test_sgd_step():
    p = ModelParams((1, 1), np.array([1.0, 1.0]))
    out = optimizer_step(p, np.array([2.0, 2.0]), OptimizerState("sgd", lr=0.1))
    np.testing.assert_allclose(out.flat, [0.8, 0.8])
    decayed = optimizer_step(p, np.zeros(2), OptimizerState("sgd", lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(decayed.flat, [0.95, 0.95])


@pytest.mark.parametrize("kind", ["sgd", "amsgrad"])
def test_zero_gradient_leaves_params(kind):
    p = init_mlp([3, 4, 2], 2)
    state = OptimizerState(kind, lr=0.01)
    q = p
    for _ in range(3):
        q = optimizer_step(q, np.zeros(p.size), state)
    assert q.flat.tobytes() == p.flat.tobytes()


def test_amsgrad_matches_hand_recurrence():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    grads = [0.5, -0.2, 0.1]
    theta, m, v, vhat = 1.0, 0.0, 0.0, 0.0
    for g in grads:
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        vhat = max(vhat, v)
        theta = theta - lr * m / (vhat ** 0.5 + eps)
    state = OptimizerState("amsgrad", lr=lr, beta1=b1, beta2=b2, eps=eps)
    p = ModelParams((1, 1), np.array([1.0, 0.0]))
    vhats = []
    for g in grads:
        p = optimizer_step(p, np.array([g, 0.0]), state)
        vhats.append(state.v_hat[0])
    assert p.flat[0] == pytest.approx(theta, abs=1e-15)
    assert all(a <= b for a, b in zip(vhats, vhats[1:]))


def test_optimizer_rejects_bad_config():
    p = init_mlp([2, 2], 0)
    with pytest.raises(ConfigError):
        optimizer_step(p, np.zeros(6), OptimizerState("sgd", lr=0.0))
    with pytest.raises(ValueError):
        optimizer_step(p, np.zeros(5), OptimizerState("sgd", lr=0.1))
    with pytest.raises(ConfigError):
        OptimizerState("adagrad")


def test_checkpoint_roundtrip(tmp_path):
    p = init_mlp([4, 3, 2], 9)
    save_params(p, tmp_path / "m.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"MLPW" and len(raw) == 4 + 8 + 12 + 8 * p.size
    q = load_params(tmp_path / "m.bin")
    assert q.layer_dims == p.layer_dims and q.flat.tobytes() == p.flat.tobytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad.bin")

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plastidoor.interventions import attach_spectral_norm
from plastidoor.neuralcore import (
    SGD, Adam, AdamState, FlatParams, NonFiniteError, PolicyNet, adam_step, backward, forward, hvp,
    init_orthogonal, load_checkpoint, save_checkpoint,
)

from oracles import gradient_check, quadratic


def test_orthogonal_1x1_is_plus_minus_gain():
    m = init_orthogonal(1, 1, 1.4142, np.random.default_rng(3))
    assert abs(abs(m[0, 0]) - 1.4142) < 1e-12


@settings(max_examples=100, deadline=None)
@given(rows=st.integers(1, 12), cols=st.integers(1, 12), gain=st.floats(0.1, 3.0), seed=st.integers(0, 10**6))
def test_orthogonal_gain_identity(rows, cols, gain, seed):
    m = init_orthogonal(rows, cols, gain, np.random.default_rng(seed))
    assert m.shape == (rows, cols)
    if rows >= cols:
        np.testing.assert_allclose(m.T @ m, gain ** 2 * np.eye(cols), atol=1e-6)
    else:
        np.testing.assert_allclose(m @ m.T, gain ** 2 * np.eye(rows), atol=1e-6)


def test_orthogonal_zero_gain():
    assert not np.any(init_orthogonal(3, 5, 0.0, np.random.default_rng(0)))


def test_orthogonal_is_seed_deterministic():
    a = init_orthogonal(6, 4, 1.0, np.random.default_rng(11))
    b = init_orthogonal(6, 4, 1.0, np.random.default_rng(11))
    assert np.array_equal(a, b)


def _scalar_net(w=2.0):
    net = PolicyNet([1, 1], "value")
    net.layers[0].weight[:] = w
    return net


def test_forward_linear_map():
    assert np.allclose(_scalar_net()(np.array([3.0])), [6.0])


def test_forward_zero_net():
    net = PolicyNet([3, 5, 2], "discrete")
    assert not np.any(net(np.ones(3)))


def test_hidden_tanh_saturates():
    net = PolicyNet([1, 1, 1], "value")
    net.layers[0].weight[:] = 100.0
    trace = forward(net, np.array([1.0]))
    assert abs(trace.post[0][0, 0] - 1.0) < 1e-9


def test_forward_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        forward(_scalar_net(), np.array([np.nan]))


def test_backward_linear_chain_rule():
    net = _scalar_net()
    trace = forward(net, np.array([3.0]))
    g = backward(net, trace, np.array([1.0]))
    assert g[net.layers[0].w_start] == 3.0
    assert g[net.layers[0].b_start] == 1.0


def test_backward_zero_output_grad():
    net = PolicyNet([3, 4, 2], "discrete", np.random.default_rng(0))
    trace = forward(net, np.ones((2, 3)))
    assert not np.any(backward(net, trace, np.zeros((2, 2))))


def test_backward_shape_mismatch():
    net = PolicyNet([3, 4, 2], "discrete", np.random.default_rng(0))
    trace = forward(net, np.ones((2, 3)))
    with pytest.raises(ValueError):
        backward(net, trace, np.zeros((3, 2)))


@pytest.mark.parametrize("layer_norm", [False, True])
@pytest.mark.parametrize("spectral", [False, True])
@pytest.mark.parametrize("head", ["discrete", "continuous", "value"])
def test_gradient_check(layer_norm, spectral, head):
    rng = np.random.default_rng(7)
    out = 1 if head == "value" else 2
    net = PolicyNet([3, 5, 4, out], head, rng, layer_norm=layer_norm)
    net.theta += 0.1 * rng.standard_normal(net.theta.size)   # move LN affine away from (1, 0)
    if spectral:
        attach_spectral_norm(net.layers[0], rng)
    assert gradient_check(net, rng.standard_normal((6, 3)), rng, forward, backward) <= 1.0


def test_adam_zero_grad_is_identity():
    p = np.array([1.0, -2.0])
    adam_step(p, np.zeros(2), AdamState.fresh(2), 1e-3)
    assert np.array_equal(p, [1.0, -2.0])


def test_adam_first_step():
    # bias-corrected m_hat = 1, v_hat = 1, so the step is lr * 1 / (1 + 1e-8)
    p = np.zeros(1)
    adam_step(p, np.ones(1), AdamState.fresh(1), 1e-3)
    assert abs(p[0] + 0.001) < 1e-6
    assert abs(p[0] + 1e-3 / (1 + 1e-8)) < 1e-15


def test_adam_weight_decay_acts_on_zero_grad():
    p = np.array([1000.0])
    st_ = AdamState.fresh(1, weight_decay=1e-5)
    adam_step(p, np.zeros(1), st_, 1e-3)
    assert p[0] < 1000.0
    assert math.isclose(st_.m[0], 0.1 * 0.01)     # (1 - beta1) * (1e-5 * 1000)


def test_adam_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        adam_step(np.zeros(2), np.array([np.inf, 0.0]), AdamState.fresh(2), 1e-3)


def test_adam_wrapper_matches_function():
    a, b = np.array([0.5, 0.2]), np.array([0.5, 0.2])
    opt, st_ = Adam(2, 0.01), AdamState.fresh(2)
    for g in ([1.0, -1.0], [0.3, 0.1]):
        opt.step(a, np.array(g))
        adam_step(b, np.array(g), st_, 0.01)
    assert np.array_equal(a, b)


def test_sgd():
    p = np.array([1.0])
    SGD(0.5).step(p, np.array([2.0]))
    assert p[0] == 0.0


@pytest.mark.parametrize("v, expected", [((1.0, 0.0), (2.0, 0.0)), ((0.0, 1.0), (0.0, 5.0))])
def test_hvp_quadratic(v, expected):
    p = FlatParams([0.3, -0.7])
    np.testing.assert_allclose(hvp(p, quadratic(np.diag([2.0, 5.0])), np.array(v)), expected, atol=1e-5)


def test_hvp_linear_loss_is_zero():
    p = FlatParams([0.3, -0.7, 1.0])
    assert np.allclose(hvp(p, quadratic(np.zeros((3, 3)), [1.0, 2.0, 3.0]), np.ones(3)), 0.0, atol=1e-6)


def test_hvp_rejects_zero_direction():
    with pytest.raises(ValueError):
        hvp(FlatParams([1.0]), quadratic(np.eye(1)), np.zeros(1))


def test_hvp_restores_parameters():
    p = FlatParams([0.1, 0.2])
    before = p.theta.copy()
    hvp(p, quadratic(np.eye(2)), np.array([0.3, 0.4]))
    assert np.array_equal(p.theta, before)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 10**6))
def test_hvp_symmetric_bilinear(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    f = quadratic(a + a.T)
    p = FlatParams(rng.standard_normal(n))
    u, v = rng.standard_normal(n), rng.standard_normal(n)
    assert abs(u @ hvp(p, f, v) - v @ hvp(p, f, u)) < 1e-5


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    net = PolicyNet([3, 8, 8, 1], "continuous", rng, layer_norm=True)
    net.theta += rng.standard_normal(net.theta.size) * 1e-3
    attach_spectral_norm(net.layers[0], rng)
    opt = Adam(net.n_params, 1e-3, weight_decay=1e-5)
    opt.step(net.theta, rng.standard_normal(net.n_params))
    save_checkpoint(tmp_path / "c.json", {"actor": (net, opt.state)}, {"note": "x"})
    nets, meta = load_checkpoint(tmp_path / "c.json")
    net2, st2 = nets["actor"]
    assert meta == {"note": "x"}
    assert np.array_equal(net.theta, net2.theta)
    assert np.array_equal(net.layers[0].sn_u, net2.layers[0].sn_u)
    assert np.array_equal(opt.state.v, st2.v) and st2.t == opt.state.t
    x = rng.standard_normal((4, 3))
    assert np.array_equal(net(x), net2(x))


def test_checkpoint_version_checked(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"version": 99, "nets": {}}))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.json")


def test_actor_shapes_follow_layout():
    rng = np.random.default_rng(0)
    actor = PolicyNet([4, 64, 64, 2], "discrete", rng)
    assert len(actor.layers) == 3
    assert [l.n_out for l in actor.layers[:-1]] == [64, 64]
    for a, b in zip(actor.layers, actor.layers[1:]):
        assert a.n_out == b.n_in

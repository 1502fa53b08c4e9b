import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plastidoor.neuralcore import FlatParams, PolicyNet, backward, forward
from plastidoor.pathology import (
    PathologySeries, PathologySnapshot, effective_rank, effective_rank_ratio, grad_dot_matrix, normalized_dot,
    penultimate_rank_ratio, sharpness, snapshot, weight_magnitude,
)

from oracles import dominant_eigenvalue, quadratic, random_symmetric


def test_weight_magnitude_examples():
    net = PolicyNet([2, 1], "value")
    assert weight_magnitude(net) == 0.0
    net.layers[0].weight[:] = [[3.0, 4.0]]
    assert math.isclose(weight_magnitude(net), math.sqrt(25 / 2))
    net2 = PolicyNet([3, 4, 1], "value")
    for w in net2.weights():
        w[:] = -0.7
    assert math.isclose(weight_magnitude(net2), 0.7)


def test_weight_magnitude_ignores_biases():
    net = PolicyNet([2, 1], "value")
    net.layers[0].bias[:] = 100.0
    assert weight_magnitude(net) == 0.0


@pytest.mark.parametrize("w, ratio", [
    (np.eye(4), 1.0),
    (np.diag([3.0, 3.0, 0.0, 0.0]), 0.5),
    (np.outer([1.0, 2, 3, 4], [1.0, -1, 0.5, 2]), 0.25),
    (np.zeros((4, 4)), 0.0),
])
def test_effective_rank_ratio(w, ratio):
    assert abs(effective_rank_ratio(w, 4) - ratio) < 1e-9


def test_effective_rank_entropy():
    s = np.array([3.0, 2.0, 1.0])
    p = s / s.sum()
    assert math.isclose(effective_rank(np.diag(s)), math.exp(-np.sum(p * np.log(p))))


def test_penultimate_layer_ratio():
    net = PolicyNet([4, 64, 64, 2], "discrete", np.random.default_rng(0))
    assert math.isclose(penultimate_rank_ratio(net), 1.0, abs_tol=1e-9)    # orthogonal init


def test_sharpness_diag():
    p = FlatParams([0.2, 0.3])
    assert abs(sharpness(p, quadratic(np.diag([2.0, 5.0])), 50, np.random.default_rng(0)) - 5.0) < 1e-3


def test_sharpness_keeps_sign():
    p = FlatParams([0.2, 0.3])
    assert abs(sharpness(p, quadratic(np.diag([-3.0, 1.0])), 50, np.random.default_rng(0)) + 3.0) < 1e-3


def test_sharpness_linear_loss():
    p = FlatParams([0.2, 0.3])
    assert abs(sharpness(p, quadratic(np.zeros((2, 2)), [1.0, 1.0]), 10, np.random.default_rng(0))) < 1e-6


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 20), seed=st.integers(0, 10**6))
def test_sharpness_matches_eigendecomposition(n, seed):
    rng = np.random.default_rng(seed)
    h = random_symmetric(n, rng)
    w = np.sort(np.abs(np.linalg.eigvalsh(h)))
    if w[-1] - w[-2] < 0.5:
        return      # power iteration needs an eigen-gap to converge in 50 steps
    got = sharpness(FlatParams(rng.standard_normal(n)), quadratic(h), 50, rng)
    assert abs(got - dominant_eigenvalue(h)) < 1e-3


def test_snapshot_rejects_non_finite():
    with pytest.raises(ValueError):
        PathologySnapshot(0, float("nan"), 0.5, 1.0)
    with pytest.raises(ValueError):
        PathologySnapshot(0, 1.0, 1.5, 1.0)


def test_series_ranges_and_order():
    s = PathologySeries()
    for step, sh in [(1, 2.0), (2, 10.0), (3, -1.0)]:
        s.append(PathologySnapshot(step, 1.0, 0.5, sh))
    assert s.range("sharpness") == 11.0
    assert s.ranges()["weight_magnitude"] == 0.0
    with pytest.raises(ValueError):
        s.append(PathologySnapshot(3, 1.0, 0.5, 0.0))


def test_snapshot_without_loss():
    net = PolicyNet([4, 8, 8, 2], "discrete", np.random.default_rng(0))
    snap = snapshot(5, net, None, 10, np.random.default_rng(0))
    assert snap.sharpness == 0.0 and snap.step == 5


def test_normalized_dot_cases():
    m = normalized_dot(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, 0.0]]))
    assert m.matrix[0, 0] == 1.0 and m.matrix[0, 1] == 0.0 and m.matrix[0, 2] == -1.0
    assert list(m.zero_rows) == [False, False, False, True]
    assert not m.matrix[3].any()


def test_grad_dot_matrix_shape_and_diagonal():
    rng = np.random.default_rng(0)
    net = PolicyNet([4, 8, 2], "discrete", rng)

    def loss_grad(n, s):
        tr = forward(n, s)
        return backward(n, tr, np.array([1.0, -1.0]))
    gd = grad_dot_matrix(net, rng.standard_normal((64, 4)), loss_grad)
    assert gd.matrix.shape == (64, 64)
    np.testing.assert_allclose(np.diag(gd.matrix), 1.0)
    assert np.allclose(gd.matrix, gd.matrix.T)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from nnfrag import analysis, engine
from nnfrag.engine import Activation, Conv2D, Dense, Model
from nnfrag.errors import (DegenerateDirection, NoConvergence, NotOrthogonal, UnsupportedActivation,
                           ZeroDerivative)

from conftest import fd_grad, random_smooth_net


def single_unit(w, beta=1.0, b=0.0):
    w = np.asarray(w, dtype=np.float64)
    return Model([Dense(w[None], [b]), Activation("relu")], (w.size,), "softplus", beta)


def two_layer(W, v, b=None, beta=1.0):
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[0]) if b is None else b
    V = np.atleast_2d(np.asarray(v, dtype=np.float64))
    return Model([Dense(W, b), Activation("relu"), Dense(V, np.zeros(V.shape[0]))], (W.shape[1],),
                 "softplus", beta)


def dense_hessian(model, x, c):
    """Input Hessian by central differences of the analytic gradient."""
    d = x.size
    H = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1e-5
        H[:, j] = (engine.grad_input(model, x + e, c) - engine.grad_input(model, x - e, c)) / 2e-5
    return 0.5 * (H + H.T)


def test_single_unit_direction_is_weight_vector():
    m = single_unit([0.6, 0.8])
    v = analysis.top_hessian_direction(m, np.array([0.3, -0.1]), 0)
    np.testing.assert_allclose(np.abs(v), [0.6, 0.8], atol=1e-6)
    assert v[0] > 0  # canonical sign


def test_linear_model_has_no_direction():
    m = Model([Dense([[1.0, 2.0]], [0.0])], (2,))
    with pytest.raises(NoConvergence):
        analysis.top_hessian_direction(m, np.array([1.0, 1.0]), 0)


@pytest.mark.parametrize("seed", range(4))
def test_direction_matches_dense_eigendecomposition(seed):
    m = random_smooth_net(seed, d=8, hidden=(6,), beta=2.0)
    x = np.random.default_rng(seed).normal(size=8)
    res = analysis.top_hessian_direction(m, x, 1, iters=2000, tol=1e-13, return_result=True)
    vals, vecs = np.linalg.eigh(dense_hessian(m, x, 1))
    top = vecs[:, np.argmax(np.abs(vals))]
    assert abs(res.vector @ top) > 0.999
    assert res.value == pytest.approx(np.max(np.abs(vals)) ** 2, rel=1e-5)
    hist = np.array(res.history)
    assert np.all(np.diff(hist) >= -1e-12 * hist[1:])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_single_unit_angle_below_one_degree(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 30))
    m = single_unit(rng.normal(size=d), beta=float(rng.uniform(0.5, 3)))
    pair = analysis.attack_angle(m, rng.normal(size=d) * 0.3, 0)
    assert 0.0 <= pair.angle_deg < 1.0
    assert abs(np.linalg.norm(pair.interp_dir) - 1) < 1e-9
    assert abs(np.linalg.norm(pair.pred_dir) - 1) < 1e-9


def test_angle_in_range_and_positive_for_two_layer():
    Q = ortho_group.rvs(6, random_state=1)[:3]
    W = Q * np.array([[1.0], [2.0], [0.5]])
    m = two_layer(W, [1.0, -0.7, 2.0])
    x = np.random.default_rng(3).normal(size=6)
    pair = analysis.attack_angle(m, x, 0)
    assert 0.0 < pair.angle_deg <= 90.0


def test_two_layer_k_ignores_zero_output_weight():
    W = np.array([[1.0, 0, 0], [0, 5.0, 0]])
    m = two_layer(W, [1.0, 0.0])
    d, k = analysis.two_layer_steepest_direction(m, np.array([0.1, 0.2, 0.3]))
    assert k == 0  # first hidden unit, 0-based
    np.testing.assert_allclose(d, [1.0, 0.0, 0.0])


def test_two_layer_rejects_non_orthogonal_rows():
    m = two_layer(np.array([[1.0, 1.0, 0], [1.0, 0, 0]]), [1.0, 1.0])
    with pytest.raises(NotOrthogonal):
        analysis.two_layer_steepest_direction(m, np.zeros(3))


@pytest.mark.parametrize("seed", range(5))
def test_two_layer_closed_form_matches_power_iteration(seed):
    rng = np.random.default_rng(seed)
    Q = ortho_group.rvs(7, random_state=seed)[:3]
    W = Q * rng.uniform(0.5, 2.0, size=(3, 1))
    m = two_layer(W, rng.normal(size=3), b=rng.normal(size=3) * 0.1)
    x = rng.normal(size=7) * 0.5
    analytic, _ = analysis.two_layer_steepest_direction(m, x)
    numeric = analysis.top_hessian_direction(m, x, 0, iters=2000, tol=1e-14)
    assert abs(analytic @ numeric) > 0.999
    g = engine.grad_input(m, x, 0)
    assert abs(analytic @ g) / np.linalg.norm(g) < 0.9999


def test_relative_change_examples():
    w = np.array([1.0, 2.0, -1.0])
    x = np.array([0.1, 0.0, 0.3])
    assert analysis.relative_saliency_change(w, x, np.array([2.0, -1.0, 0.0])) == 0.0
    eps = 0.01
    d1, d2 = analysis.activation_derivs("softplus", 1.0)
    z = w @ x
    got = analysis.relative_saliency_change(w, x, eps * np.sign(w))
    assert got == pytest.approx(eps * np.abs(w).sum() * d2(z) / d1(z))
    one = analysis.relative_saliency_change([0.7], [0.2], [eps])
    assert one == pytest.approx(eps * 0.7 * d2(0.14) / d1(0.14))


def test_relative_change_zero_derivative():
    with pytest.raises(ZeroDerivative):
        analysis.relative_saliency_change([1.0], [1.0], [0.1], g=(lambda z: 0.0, lambda z: 1.0))


@pytest.mark.parametrize("seed", range(3))
def test_relative_change_matches_engine(seed):
    rng = np.random.default_rng(seed)
    w, x, delta = rng.normal(size=5), rng.normal(size=5), rng.normal(size=5) * 0.01
    m = single_unit(w, beta=1.0)
    Hd = engine.hessian_input_vp(m, x, delta, 0)
    g = engine.grad_input(m, x, 0)
    expected = analysis.relative_saliency_change(w, x, delta)
    np.testing.assert_allclose(Hd / g, expected, rtol=1e-6)


def test_dimension_scaling(tmp_path):
    res = analysis.dimension_scaling_experiment([10, 100, 1000, 10000], trials=100, seed=0,
                                                out=tmp_path / "s.csv")
    dims, means = res.means()
    assert all(a < b for a, b in zip(means, means[1:]))
    assert res.slope == pytest.approx(0.5, abs=0.1)
    assert max(res.p_values) < 0.01
    for r in res.rows:
        assert r["saliency_change"] == pytest.approx(r["influence_change"], rel=1e-12)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "dim,trial,saliency_change,influence_change" and len(lines) == 401


def test_operator_norm_examples():
    assert analysis.operator_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-9)
    assert analysis.operator_norm(np.eye(4)) == pytest.approx(1.0, rel=1e-12)
    W = np.random.default_rng(0).normal(size=(5, 7))
    ref = math.sqrt(np.linalg.eigvalsh(W.T @ W).max())
    assert abs(analysis.operator_norm(W, iters=5000, tol=1e-15) - ref) / ref < 1e-8


def test_conv_operator_norm_matches_unrolled_matrix():
    rng = np.random.default_rng(0)
    layer = Conv2D(rng.normal(size=(3, 2, 3, 3)), np.zeros(3), stride=2, padding=1)
    in_shape = (2, 5, 5)
    n = int(np.prod(in_shape))
    cols = [layer.linear(e.reshape((1,) + in_shape)).ravel() for e in np.eye(n)]
    ref = np.linalg.norm(np.array(cols).T, 2)
    assert analysis.layer_operator_norm(layer, in_shape) == pytest.approx(ref, rel=1e-8)


def test_lipschitz_examples():
    lin = engine.build([("dense", 3), "identity", ("dense", 2)], (4,), seed=0)
    assert analysis.lipschitz_interpretation_bound(lin) == 0.0
    assert analysis.lipschitz_interpretation_bound(Model([Dense(np.eye(3), np.zeros(3))], (3,))) == 0.0
    m = Model([Dense(2 * np.eye(3), np.zeros(3)), Activation("relu")], (3,), "softplus", 1.0)
    assert analysis.lipschitz_interpretation_bound(m) == pytest.approx(1.0, rel=1e-9)
    with pytest.raises(UnsupportedActivation):
        analysis.lipschitz_interpretation_bound(m.exact())


@pytest.mark.parametrize("seed", range(3))
def test_lipschitz_bound_dominates_samples(seed):
    m = random_smooth_net(seed, d=6, hidden=(8,), beta=3.0)
    bound = analysis.lipschitz_interpretation_bound(m)
    for c in range(3):
        for scale in (0.1, 1.0):
            ratios = analysis.sampled_gradient_ratios(m, c, n=300, seed=seed, scale=scale)
            assert ratios.max() <= bound


def test_lipschitz_conv_net_is_finite():
    m = engine.build([("conv", 2, 3, 1, 1), "relu", "flatten", ("dense", 3)], (1, 4, 4), seed=0).smooth(2.0)
    assert 0 < analysis.lipschitz_interpretation_bound(m) < np.inf


def test_influence_attack_angle():
    rng = np.random.default_rng(0)
    m = engine.build([("dense", 4), "relu", ("dense", 2)], (3,), seed=0)
    X = rng.normal(size=(12, 3))
    y = rng.integers(0, 2, 12)
    pair = analysis.influence_attack_angle(m, (X, y), (X[0], int(y[0])), damping=0.1)
    assert 0.0 <= pair.angle_deg <= 90.0
    sat = Model([Dense([[60.0, 0.0], [-60.0, 0.0]], [0.0, 0.0])], (2,))
    with pytest.raises(DegenerateDirection):
        analysis.influence_attack_angle(sat, (X[:, :2], y), (np.array([50.0, 0.0]), 0), damping=0.1)


def test_angle_csv(tmp_path):
    analysis.write_angles_csv(tmp_path / "a.csv", [1.0, 45.0, 89.0])
    assert (tmp_path / "a.csv").read_text().splitlines()[1] == "0,1"
    hist = (tmp_path / "a_hist.csv").read_text().splitlines()
    assert hist[0] == "bin_lo,bin_hi,count" and len(hist) == 19

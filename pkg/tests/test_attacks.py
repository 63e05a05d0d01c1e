import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nnfrag import attacks, engine, interpret
from nnfrag.attacks import AttackConfig, Dissimilarity
from nnfrag.interpret import ReferencePoint

from conftest import fd_grad, random_conv_net, rel_err


def small_image_net(seed=0, beta=2.0):
    spec = ["flatten", ("dense", 12), "relu", ("dense", 3)]
    return engine.build(spec, (1, 5, 5), seed=seed).smooth(beta)


def test_dissimilarity_examples():
    rng = np.random.default_rng(0)
    I = rng.random((1, 4, 4))
    I /= I.sum()
    assert Dissimilarity("mass_center", I).value(I) == 0.0
    top = np.sort(I.ravel())[::-1][:5].sum()
    assert Dissimilarity("top_k", I, k=5).value(I) == pytest.approx(-top)
    uniform = np.full((3, 3), 1 / 9)
    mask = np.zeros((3, 3), dtype=bool)
    mask[:2, :2] = True
    assert Dissimilarity("targeted", uniform, mask=mask).value(uniform) == pytest.approx(4 / 9)


def test_dissimilarity_wrapper_uses_saliency_fn():
    m = small_image_net()
    x = np.random.default_rng(1).random((1, 5, 5))

    def fn(z):
        return interpret.simple_gradient_saliency(m, z, 0)

    assert attacks.dissimilarity("mass_center", x, x, fn) == 0.0
    assert attacks.dissimilarity("top_k", x, x, fn, k=3) < 0


def test_mask_shape_checked():
    with pytest.raises(Exception):
        Dissimilarity("targeted", np.ones((1, 3, 3)) / 9, mask=np.ones((4, 4)))


def test_config_invariants():
    with pytest.raises(ValueError):
        AttackConfig("top_k", epsilon=0.01, alpha=1.0, P=5)
    with pytest.raises(ValueError):
        AttackConfig("targeted", epsilon=0.1)
    assert AttackConfig("center", 0.1).kind == "mass_center"
    assert AttackConfig("topk", 0.1, saliency_method="ig").saliency_method == "integrated_gradients"


def test_random_sign_examples():
    x = np.array([0.2, 0.4, 0.6, 0.8])
    np.testing.assert_array_equal(attacks.random_sign_perturbation(x, 0.0, 3), x)
    p = attacks.random_sign_perturbation(x, 0.1, 3)
    np.testing.assert_allclose(np.abs(p - x), 0.1)
    np.testing.assert_array_equal(p, attacks.random_sign_perturbation(x, 0.1, 3))


def test_random_sign_clips_to_range():
    x = np.array([0.0, 1.0, 0.0, 1.0])
    p = attacks.random_sign_perturbation(x, 0.5, 0)
    assert p.min() >= 0.0 and p.max() <= 1.0


@pytest.mark.parametrize("kind", ["top_k", "targeted", "mass_center"])
@pytest.mark.parametrize("method", interpret.METHODS)
def test_attack_gradient_matches_finite_differences(kind, method):
    m = random_conv_net(3)
    rng = np.random.default_rng(7)
    x_t = rng.random((2, 6, 6))
    ref = ReferencePoint(rng.random((2, 6, 6)) * 0.2)
    label = 1
    mask = np.zeros((6, 6), dtype=bool)
    mask[:3, 3:] = True
    I_t = interpret.saliency(method, m, x_t, ref, M=5, class_index=label).values
    obj = Dissimilarity(kind, I_t, k=10, mask=mask)
    x = np.clip(x_t + rng.normal(scale=0.05, size=x_t.shape), 0, 1)

    def D(z):
        return obj.value(interpret.saliency(method, m, z, ref, M=5, class_index=label).values)

    val, g = attacks.attack_gradient(obj, method, m, x, label, ref, 5)
    assert val == pytest.approx(D(x))
    assert rel_err(g, fd_grad(D, x.copy(), h=1e-6)) < 1e-4


def test_mass_center_first_step_is_not_zero():
    m = random_conv_net(1)
    x = np.random.default_rng(0).random((2, 6, 6))
    I_t = interpret.simple_gradient_saliency(m, x, 0).values
    obj = Dissimilarity("mass_center", I_t)
    val, g = attacks.attack_gradient(obj, "simple_gradient", m, x, 0, None, 1)
    assert val == 0.0
    assert np.abs(g).sum() > 0


def test_epsilon_zero_is_identity():
    m = random_conv_net(0).exact()
    x = np.random.default_rng(2).random((2, 6, 6))
    for kind in ("random_sign", "top_k", "mass_center"):
        r = attacks.iterative_attack(m, x, AttackConfig(kind, 0.0, P=5, k=10))
        np.testing.assert_array_equal(r.x_adv, x)
        assert r.metrics.rank_correlation == 1.0 and r.metrics.topk_intersection == 1.0
        assert r.metrics.center_shift == 0.0


def test_linear_model_simple_gradient_unchanged():
    m = engine.build(["flatten", ("dense", 3)], (1, 4, 4), seed=0)
    x = np.random.default_rng(0).random((1, 4, 4))
    for kind in ("top_k", "mass_center", "random_sign"):
        r = attacks.iterative_attack(m, x, AttackConfig(kind, 8 / 255, P=20, k=5))
        assert len(set(r.dissimilarity_trace)) <= 1
        assert r.metrics.rank_correlation == 1.0
        assert r.metrics.topk_intersection == 1.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["top_k", "mass_center", "targeted", "random_sign"]),
       st.floats(0.005, 0.2), st.sampled_from(interpret.METHODS))
def test_attack_invariants(seed, kind, eps, method):
    m = small_image_net(seed % 7)
    rng = np.random.default_rng(seed)
    x = rng.random((1, 5, 5))
    mask = rng.random((5, 5)) < 0.3
    cfg = AttackConfig(kind, eps, alpha=eps / 4, P=8, seed=seed, saliency_method=method, k=5, M=4,
                       mask=mask, reference=ReferencePoint(np.full((1, 5, 5), 0.5)))
    r = attacks.iterative_attack(m, x, cfg)
    assert np.max(np.abs(r.x_adv - x)) <= eps + 1e-9
    assert r.x_adv.min() >= 0 and r.x_adv.max() <= 1
    exact = m.exact()
    if r.prediction_preserved:
        assert np.argmax(engine.forward(exact, r.x_adv)) == np.argmax(engine.forward(exact, x))
    else:
        np.testing.assert_array_equal(r.x_adv, x)
    if kind != "random_sign":
        assert len(r.dissimilarity_trace) == cfg.P
        kept = [d for d, ok in zip(r.dissimilarity_trace, r.preserved_trace) if ok]
        if r.selected_iteration:
            assert r.dissimilarity_trace[r.selected_iteration - 1] == max(kept)


def test_targeted_attack_raises_region_mass():
    m = small_image_net(2, beta=5.0)
    x = np.random.default_rng(4).random((1, 5, 5))
    mask = np.zeros((5, 5), dtype=bool)
    mask[:2, :2] = True
    cfg = AttackConfig("targeted", 0.1, alpha=0.01, P=40, mask=mask)
    r = attacks.iterative_attack(m, x, cfg)
    before = r.saliency_before.values[0][mask].sum()
    after = r.saliency_after.values[0][mask].sum()
    assert r.prediction_preserved and after > before


def test_top_k_attack_reduces_top_k_mass_on_mnist(mnist_model):
    model, train, test = mnist_model
    exact = model.exact()
    pred = np.argmax(engine.forward(exact, test.images[:80]), axis=1)
    idx = np.flatnonzero(pred == test.labels[:80])[:50]
    smooth = model.smooth()
    drops = []
    for i in idx:
        x = test.images[i]
        cfg = AttackConfig("top_k", 8 / 255, P=300, k=100)
        r = attacks.iterative_attack(model, x, cfg)
        I0 = interpret.simple_gradient_saliency(smooth, x, r.label).values.ravel()
        I1 = interpret.simple_gradient_saliency(smooth, r.x_adv, r.label).values.ravel()
        top = np.argsort(-I0, kind="stable")[:100]
        drops.append(I1[top].sum() < I0[top].sum())
    assert np.mean(drops) >= 0.9

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from ssadv import tensor as T
from ssadv.attacks import (
    AttackConfig,
    attack_loss,
    check_in_ball,
    default_alpha,
    per_sample_ce,
    pgd_attack,
    pgd_step,
    project,
    random_init,
    sample_ball,
)
from ssadv.data import synthetic_dataset
from ssadv.models import ArchConfig, LinearModel, build_model
from ssadv.training import TrainConfig, TrainMode, adv_train, mode_attack

deltas = hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-3, 3))


def test_project_examples():
    np.testing.assert_array_equal(project(np.array([[0.3, -0.5]]), 0.2, "linf"), [[0.2, -0.2]])
    np.testing.assert_allclose(project(np.array([[3.0, 4.0]]), 1.0, "l2"), [[0.6, 0.8]])


@given(deltas, st.floats(0.01, 2.0))
def test_projection_idempotent(delta, eps):
    once = project(delta, eps, "linf")
    np.testing.assert_array_equal(project(once, eps, "linf"), once)
    once = project(delta, eps, "l2")
    np.testing.assert_allclose(project(once, eps, "l2"), once, atol=1e-6)


@given(deltas)
def test_projection_keeps_interior_points(delta):
    big = float(np.abs(delta).max()) + 1.0
    np.testing.assert_array_equal(project(delta, big, "linf"), delta)
    big = float(np.sqrt((delta ** 2).sum(axis=1)).max()) + 1.0
    np.testing.assert_array_equal(project(delta, big, "l2"), delta)


def test_random_init_zero_eps_is_identity(rng):
    X = rng.random((3, 1, 2, 2)).astype(np.float32)
    for norm in ("linf", "l2"):
        np.testing.assert_array_equal(random_init(X, 0.0, norm, rng), X)


def test_linf_ball_samples_bounded(rng):
    d = sample_ball((1000, 3, 4, 4), 0.1, "linf", rng)
    assert np.abs(d).max() <= 0.1
    assert np.abs(d).max() > 0.099


def test_l2_radius_follows_power_law():
    d, eps = 6, 0.5
    r = np.sqrt((sample_ball((10_000, d), eps, "l2", np.random.default_rng(11)) ** 2).sum(1))
    assert r.max() <= eps * (1 + 1e-12)
    # r = eps * u^(1/d)  <=>  (r/eps)^d ~ U(0, 1)
    assert stats.kstest((r / eps) ** d, "uniform").pvalue > 0.01


def test_l2_direction_is_isotropic():
    v = sample_ball((20_000, 3), 1.0, "l2", np.random.default_rng(2))
    u = v / np.linalg.norm(v, axis=1, keepdims=True)
    np.testing.assert_allclose(u.mean(0), 0, atol=0.03)


def test_default_alpha_rule():
    assert default_alpha("l2", 1.0, 20) == pytest.approx(0.1)
    assert default_alpha("linf", 8 / 255, 20) == pytest.approx(2 / 255)


def test_config_validation():
    with pytest.raises(ValueError, match="steps"):
        AttackConfig(steps=-1).validate()
    with pytest.raises(ValueError, match="epsilon"):
        AttackConfig(epsilon=-0.1).validate()
    with pytest.raises(ValueError, match="alpha"):
        AttackConfig(alpha=0.0, steps=3).validate()
    with pytest.raises(ValueError, match="targeted"):
        AttackConfig(targeted=True).validate()
    AttackConfig(alpha=0.0, steps=0).validate()


# --- steps -------------------------------------------------------------------

def test_l2_zero_gradient_sample_does_not_move():
    X = np.full((2, 4), 0.5, np.float32)
    g = np.array([[0, 0, 0, 0], [1, 0, 0, 0]], np.float32)
    out = pgd_step(X, g, 0.1, "l2", X, 1.0)
    np.testing.assert_array_equal(out[0], X[0])
    np.testing.assert_allclose(out[1], [0.6, 0.5, 0.5, 0.5], rtol=1e-6)


def test_linf_sign_of_zero_is_zero():
    X = np.full((1, 3), 0.5, np.float32)
    out = pgd_step(X, np.array([[1.0, 0.0, -2.0]], np.float32), 0.1, "linf", X, 0.2)
    np.testing.assert_allclose(out, [[0.6, 0.5, 0.4]], rtol=1e-6)


def test_step_clamps_pixels():
    X = np.array([[0.99, 0.01]], np.float32)
    out = pgd_step(X, np.array([[1.0, -1.0]], np.float32), 0.1, "linf", X, 0.2)
    np.testing.assert_array_equal(out, [[1.0, 0.0]])


def test_step_rejects_shape_mismatch():
    with pytest.raises(T.ShapeError):
        pgd_step(np.zeros((1, 3)), np.zeros((1, 4)), 0.1, "linf", np.zeros((1, 3)), 0.1)


# --- attack loss ---------------------------------------------------------------

def _tiny(seed=0):
    return build_model(ArchConfig("tiny-cnn", 0.25, (3, 8, 8), 10, 4), seed).eval()


def test_attack_loss_without_ss_is_supervised_ce(rng):
    m = _tiny()
    X, y = rng.random((4, 3, 8, 8)), rng.integers(0, 10, 4)
    ref = T.cross_entropy_mean(m.predict_sup(X), y).item()
    assert attack_loss(m, T.Tensor(X), y).item() == ref
    Xs, ys = rng.random((4, 3, 8, 8)), rng.integers(0, 4, 4)
    assert attack_loss(m, T.Tensor(X), y, (Xs, ys), 0.0, True).item() == pytest.approx(ref, abs=1e-7)


def test_attack_loss_arithmetic(rng):
    m = _tiny()
    for head in ("sup_head", "ss_head"):
        m.params[head + ".weight"].data[...] = 0
    # CE of label 0 against equal competitors: log(1 + (C-1) e^b)
    m.params["sup_head.bias"].data[1:] = math.log((math.e - 1) / 9)
    m.params["ss_head.bias"].data[1:] = math.log((math.exp(0.5) - 1) / 3)
    X = rng.random((2, 3, 8, 8))
    loss = attack_loss(m, T.Tensor(X), [0, 0], (X, [0, 0]), lambda2=2.0, use_ss=True).item()
    assert loss == pytest.approx(2.0, abs=1e-5)


def test_attack_loss_requires_ss_batch(rng):
    with pytest.raises(ValueError):
        attack_loss(_tiny(), T.Tensor(rng.random((1, 3, 8, 8))), [0], use_ss=True)


# --- pgd ---------------------------------------------------------------------

def test_no_steps_no_start_is_identity(rng):
    X = rng.random((3, 3, 8, 8)).astype(np.float32)
    adv = pgd_attack(_tiny(), X, [0, 1, 2], AttackConfig(steps=0, random_start=False), rng)
    np.testing.assert_array_equal(adv.x_adv, X)


def test_linear_single_step_hits_closed_form(rng):
    w = rng.standard_normal((12, 2))
    m = LinearModel(w, np.zeros(2), (3, 2, 2))
    X = rng.random((5, 3, 2, 2)).astype(np.float32)
    y = np.array([0, 1, 1, 0, 1])
    eps = 0.05
    adv = pgd_attack(m, X, y, AttackConfig("linf", eps, eps, 1, random_start=False), rng)
    # d CE / dx has the sign of (w_other - w_label)
    direction = np.sign(w[:, 1 - y] - w[:, y]).T.reshape(X.shape)
    np.testing.assert_allclose(adv.x_adv, np.clip(X + eps * direction, 0, 1), atol=1e-7)


def test_attack_does_not_touch_model_and_restores_mode(rng):
    m = _tiny().train()
    before = m.copy_state()
    X = rng.random((4, 3, 8, 8)).astype(np.float32)
    Xs = rng.random((4, 3, 8, 8)).astype(np.float32)
    cfg = AttackConfig(use_ss_loss=True, attack_ss=True, steps=3)
    pgd_attack(m, X, [0, 1, 2, 3], cfg, rng, ss_batch=(Xs, [0, 1, 2, 3]))
    assert m.training
    for k, v in m.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    assert all(t.grad is None for t in m.params.values())


@pytest.mark.parametrize("norm,eps", [("linf", 8 / 255), ("l2", 0.25)])
def test_attack_is_deterministic(rng, norm, eps):
    X = rng.random((4, 3, 8, 8)).astype(np.float32)
    cfg = AttackConfig(norm, eps, default_alpha(norm, eps, 5), 5)
    a = pgd_attack(_tiny(), X, [0, 1, 2, 3], cfg, np.random.default_rng(3)).x_adv
    b = pgd_attack(_tiny(), X, [0, 1, 2, 3], cfg, np.random.default_rng(3)).x_adv
    assert a.tobytes() == b.tobytes()


def test_attack_rejects_bad_inputs(rng):
    X = rng.random((1, 3, 8, 8)).astype(np.float32)
    with pytest.raises(ValueError, match="steps"):
        pgd_attack(_tiny(), X, [0], AttackConfig(steps=-1), rng)
    with pytest.raises(ValueError, match="self-supervised"):
        pgd_attack(_tiny(), X, [0], AttackConfig(use_ss_loss=True), rng)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        pgd_attack(_tiny(), X + 1, [0], AttackConfig(), rng)


def test_ss_batch_handling_per_mode(rng):
    X = rng.random((4, 3, 8, 8)).astype(np.float32)
    Xs = rng.random((4, 3, 8, 8)).astype(np.float32)
    y, ys = [0, 1, 2, 3], [3, 2, 1, 0]
    base = AttackConfig(steps=3)
    t1 = pgd_attack(_tiny(), X, y, mode_attack("T1", base), rng, ss_batch=(Xs, ys))
    assert t1.x_ss_adv is None
    t3 = pgd_attack(_tiny(), X, y, mode_attack("T3", base), rng, ss_batch=(Xs, ys))
    assert not np.array_equal(t3.x_ss_adv, Xs)
    check_in_ball(t3.x_ss_adv, Xs, base.epsilon, "linf")
    # SS images reached the boundary: they followed gradient steps, not only the random start
    assert np.isclose(np.abs(t3.x_ss_adv - Xs).max(), base.epsilon, rtol=1e-5)
    t2 = pgd_attack(_tiny(), X, y, mode_attack("T2", base), np.random.default_rng(0), ss_batch=(Xs, ys))
    check_in_ball(t2.x_ss_adv, Xs, base.epsilon, "linf")
    assert not np.array_equal(t2.x_ss_adv, Xs)


def test_losses_reported_per_sample(rng):
    m = _tiny()
    X = rng.random((3, 3, 8, 8)).astype(np.float32)
    adv = pgd_attack(m, X, [0, 1, 2], AttackConfig(steps=2), rng)
    with T.no_grad():
        ref = per_sample_ce(m.predict_sup(adv.x_adv).data, [0, 1, 2])
    np.testing.assert_allclose(adv.losses, ref)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["linf", "l2"]), st.integers(1, 10), st.integers(1, 10))
def test_monotone_ascent_on_logistic_model(seed, norm, k, extra):
    r = np.random.default_rng(seed)
    m = LinearModel(r.standard_normal((8, 2)), r.standard_normal(2), (2, 2, 2))
    X = r.uniform(0.2, 0.8, (6, 2, 2, 2)).astype(np.float32)
    y = r.integers(0, 2, 6)
    eps = 0.1
    cfg = AttackConfig(norm, eps, eps / 20, k, random_start=False)
    short = pgd_attack(m, X, y, cfg, r).losses.mean()
    long = pgd_attack(m, X, y, dataclasses.replace(cfg, steps=k + extra), r).losses.mean()
    assert long >= short - 1e-4


def test_attack_raises_loss_on_trained_model():
    ds = synthetic_dataset("striped-classes", 512, 0, (3, 16, 16), 10)
    cfg = TrainConfig(epochs=3, batch_size=64, lr=0.05, seed=0, augment=False,
                      mode=TrainMode("T0", 0.0, AttackConfig(steps=0, random_start=False)))
    model = adv_train(cfg, ds, None, arch=ArchConfig("tiny-cnn", 0.5, (3, 16, 16), 10, 4)).model.eval()
    test = synthetic_dataset("striped-classes", 256, 1, (3, 16, 16), 10)
    X, y = test.images, test.labels
    with T.no_grad():
        clean = per_sample_ce(model.predict_sup(X).data, y).mean()
    adv = pgd_attack(model, X, y, AttackConfig("linf", 8 / 255, 2 / 255, 20), np.random.default_rng(0))
    assert adv.losses.mean() > clean

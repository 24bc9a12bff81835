import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vseg import gradcheck, losses

rng = np.random.default_rng(4242)


def test_jaccard_identical_nonempty_is_one():
    t = (rng.random((4, 4, 4)) < 0.3).astype(np.float64)
    t.ravel()[0] = 1.0
    assert losses.jaccard(t, t) == 1.0


def test_jaccard_both_empty_is_one():
    z = np.zeros((3, 3, 3))
    assert losses.jaccard(z, z) == 1.0


def test_jaccard_disjoint_near_zero():
    p = np.zeros((4, 4, 4))
    t = np.zeros((4, 4, 4))
    p[0, 0, 0] = 1.0
    t[1, 1, 1] = 1.0
    assert losses.jaccard(p, t) < 1e-6


def test_dice_hand_case():
    p = np.array([1.0, 1.0, 0.0, 0.0])
    t = np.array([1.0, 0.0, 1.0, 0.0])
    npt.assert_allclose(losses.dice(p, t), 0.5, rtol=1e-6)


@settings(max_examples=200)
@given(st.integers(0, 2 ** 31 - 1))
def test_dice_equals_two_j_over_one_plus_j(seed):
    g = np.random.default_rng(seed)
    shape = (3, 3, 3)
    p = (g.random(shape) < g.random()).astype(np.float64)
    t = (g.random(shape) < g.random()).astype(np.float64)
    j = losses.jaccard(p, t)
    npt.assert_allclose(losses.dice(p, t), 2.0 * j / (1.0 + j), rtol=1e-6, atol=1e-12)


def test_jaccard_loss_per_class_in_unit_interval():
    for _ in range(50):
        probs = rng.random((4, 3, 3, 3))
        labels = rng.integers(0, 4, (3, 3, 3))
        total, per_class = losses.jaccard_loss(probs, labels)
        assert set(per_class) == {1, 2, 3}
        for v in per_class.values():
            assert 0.0 <= v <= 1.0
        npt.assert_allclose(total, sum(per_class.values()), rtol=1e-12)


def test_jaccard_loss_excludes_background_by_default():
    probs = rng.random((3, 2, 2, 2))
    labels = np.zeros((2, 2, 2), dtype=np.uint8)
    _, per_class = losses.jaccard_loss(probs, labels)
    assert 0 not in per_class


def test_jaccard_loss_explicit_class_set():
    probs = rng.random((3, 2, 2, 2))
    labels = rng.integers(0, 3, (2, 2, 2))
    _, per_class = losses.jaccard_loss(probs, labels, classes=(0, 1, 2))
    assert set(per_class) == {0, 1, 2}


def test_jaccard_loss_empty_target_nonempty_pred_near_one():
    probs = np.zeros((2, 4, 4, 4))
    probs[1] = 0.9
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    _, per_class = losses.jaccard_loss(probs, labels)
    assert per_class[1] > 0.99


def test_jaccard_loss_empty_target_empty_pred_near_zero():
    probs = np.zeros((2, 4, 4, 4))
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    _, per_class = losses.jaccard_loss(probs, labels)
    assert per_class[1] < 1e-3


def test_jaccard_grad_zero_scores_closed_form():
    eps = losses.SMOOTH_EPS
    probs = np.zeros((2, 3, 3, 3))
    labels = np.zeros((3, 3, 3), dtype=np.uint8)
    labels[1, 1, 1] = 1
    labels[0, 0, 0] = 1
    grad = losses.jaccard_loss_grad(probs, labels)
    t = (labels == 1)
    b = float(t.sum())
    expected = -(b + 2 * eps) / (b + eps) ** 2
    npt.assert_allclose(grad[1][t], expected, rtol=1e-9)
    assert (grad[1][~t] == 0.0).all()
    assert (grad[0] == 0.0).all()


def fd_loss_grad(fn, probs, h=1e-5):
    g = np.zeros_like(probs)
    flat = probs.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(8))
def test_jaccard_grad_matches_finite_differences(seed):
    g = np.random.default_rng(seed)
    probs = g.random((3, 3, 3, 3))
    labels = g.integers(0, 3, (3, 3, 3))
    analytic = losses.jaccard_loss_grad(probs, labels)
    fd = fd_loss_grad(lambda: losses.jaccard_loss(probs, labels)[0], probs)
    assert gradcheck.rel_error(analytic, fd) < 1e-4


def test_cross_entropy_uniform_is_log_class_count():
    probs = np.full((5, 3, 3, 3), 0.2)
    labels = rng.integers(0, 5, (3, 3, 3))
    npt.assert_allclose(losses.cross_entropy(probs, labels), np.log(5.0), rtol=1e-9)


def test_cross_entropy_clamps_zero_probability():
    probs = np.zeros((2, 2, 2, 2))
    labels = np.ones((2, 2, 2), dtype=np.uint8)
    v = losses.cross_entropy(probs, labels)
    assert np.isfinite(v)
    npt.assert_allclose(v, -np.log(losses.SMOOTH_EPS), rtol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_grad_matches_finite_differences(seed):
    g = np.random.default_rng(100 + seed)
    probs = 0.05 + 0.9 * g.random((3, 3, 3, 3))
    labels = g.integers(0, 3, (3, 3, 3))
    analytic = losses.cross_entropy_grad(probs, labels)
    fd = fd_loss_grad(lambda: losses.cross_entropy(probs, labels), probs)
    assert gradcheck.rel_error(analytic, fd) < 1e-4


def test_cross_entropy_grad_zero_off_true_class():
    probs = 0.1 + 0.8 * rng.random((3, 2, 2, 2))
    labels = np.full((2, 2, 2), 2, dtype=np.uint8)
    grad = losses.cross_entropy_grad(probs, labels)
    assert (grad[0] == 0.0).all() and (grad[1] == 0.0).all()
    assert (grad[2] < 0.0).all()


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError, match="outside"):
        losses.cross_entropy(np.ones((2, 2, 2, 2)) * 0.5, np.full((2, 2, 2), 5))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualnorm.losses import (hybrid_loss, kl_regularizer,
                             kl_regularizer_with_grads,
                             per_sample_cross_entropy, softmax_cross_entropy)


def test_hybrid_alpha_endpoints(rng):
    lc = rng.normal(0, 2, (8, 10))
    la = rng.normal(0, 2, (8, 10))
    y = rng.integers(0, 10, 8)
    ce_c = per_sample_cross_entropy(lc, y).mean()
    ce_a = per_sample_cross_entropy(la, y).mean()
    assert hybrid_loss(lc, la, y, 1.0) == pytest.approx(ce_c, rel=1e-12)
    assert hybrid_loss(lc, la, y, 0.0) == pytest.approx(ce_a, rel=1e-12)


def test_hybrid_linear_in_alpha(rng):
    lc = rng.normal(0, 2, (6, 4))
    la = rng.normal(0, 2, (6, 4))
    y = rng.integers(0, 4, 6)
    ce_c = per_sample_cross_entropy(lc, y).mean()
    ce_a = per_sample_cross_entropy(la, y).mean()
    for a in (0.0, 0.25, 0.5, 1.0):
        assert hybrid_loss(lc, la, y, a) == pytest.approx(
            a * ce_c + (1 - a) * ce_a, rel=1e-12)


def test_hybrid_two_class_zero_logits():
    # both branches uniform over 2 classes: loss = ln 2
    z = np.zeros((5, 2))
    y = np.zeros(5, dtype=int)
    assert hybrid_loss(z, z, y, 0.5) == pytest.approx(np.log(2), rel=1e-9)


def test_kl_identical_logits_zero(rng):
    z = rng.normal(0, 3, (7, 10))
    assert kl_regularizer(z, z.copy()) == pytest.approx(0.0, abs=1e-12)


def test_kl_hand_computed_two_class():
    # p = (0.9, 0.1), q = (0.5, 0.5)
    lp = np.log(np.array([[0.9, 0.1]]))
    lq = np.log(np.array([[0.5, 0.5]]))
    want = 0.9 * np.log(1.8) + 0.1 * np.log(0.2)
    assert kl_regularizer(lp, lq) == pytest.approx(want, rel=1e-9)
    assert want == pytest.approx(0.3681, abs=5e-5)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_kl_non_negative(seed):
    r = np.random.default_rng(seed)
    n, c = int(r.integers(1, 8)), int(r.integers(2, 12))
    kl = kl_regularizer(r.normal(0, 4, (n, c)), r.normal(0, 4, (n, c)))
    assert kl >= 0.0


def test_kl_gradients_match_finite_differences(rng):
    lc = rng.normal(0, 1, (4, 6))
    la = rng.normal(0, 1, (4, 6))
    _, dc, da = kl_regularizer_with_grads(lc, la)
    h = 1e-6
    for _ in range(8):
        i = (int(rng.integers(0, 4)), int(rng.integers(0, 6)))
        for arr, grad in ((lc, dc), (la, da)):
            p, m = arr.copy(), arr.copy()
            p[i] += h
            m[i] -= h
            if arr is lc:
                fd = (kl_regularizer(p, la) - kl_regularizer(m, la)) / (2 * h)
            else:
                fd = (kl_regularizer(lc, p) - kl_regularizer(lc, m)) / (2 * h)
            assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_cross_entropy_gradient(rng):
    z = rng.normal(0, 2, (5, 7))
    y = rng.integers(0, 7, 5)
    loss, d = softmax_cross_entropy(z, y)
    h = 1e-6
    for _ in range(6):
        i = (int(rng.integers(0, 5)), int(rng.integers(0, 7)))
        p, m = z.copy(), z.copy()
        p[i] += h
        m[i] -= h
        fd = (softmax_cross_entropy(p, y)[0] - softmax_cross_entropy(m, y)[0]) / (2 * h)
        assert d[i] == pytest.approx(fd, rel=1e-5, abs=1e-10)


def test_cross_entropy_extreme_logits_stable():
    z = np.array([[1000.0, -1000.0], [-1000.0, 1000.0]])
    y = np.array([0, 0])
    loss = per_sample_cross_entropy(z, y)
    assert np.isfinite(loss).all()
    assert loss[0] == pytest.approx(0.0, abs=1e-9)
    assert loss[1] == pytest.approx(2000.0, rel=1e-9)

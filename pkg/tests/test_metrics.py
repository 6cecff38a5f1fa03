import numpy as np
import pytest

from objvo.geometry import Gaussian2D, rot2
from objvo.metrics import MetricConfig, WassersteinForm, normalized_wasserstein, wasserstein2_sq

FORMS = [WassersteinForm.FROBENIUS, WassersteinForm.BURES_TRACE]


def _random_gaussian(rng, spread=20.0):
    l1 = rng.uniform(0.5, 30.0)
    l2 = rng.uniform(0.5, 30.0)
    R = rot2(rng.uniform(-np.pi, np.pi))
    cov = R @ np.diag([l1, l2]) @ R.T
    return Gaussian2D(rng.uniform(-spread, spread, size=2), 0.5 * (cov + cov.T))


@pytest.mark.parametrize("form", FORMS)
def test_identity_and_mean_offset(form):
    g = Gaussian2D(np.array([3.0, 4.0]), np.diag([2.0, 5.0]))
    assert wasserstein2_sq(g, g, form) == 0.0
    moved = Gaussian2D(g.mean + np.array([6.0, 8.0]), g.covariance)
    assert abs(wasserstein2_sq(g, moved, form) - 100.0) < 1e-12


def test_frobenius_diagonal_hand_case():
    a = Gaussian2D(np.zeros(2), np.diag([4.0, 4.0]))
    b = Gaussian2D(np.zeros(2), np.diag([9.0, 9.0]))
    # || diag(2,2) - diag(3,3) ||_F^2 = 2
    assert abs(wasserstein2_sq(a, b, WassersteinForm.FROBENIUS) - 2.0) < 1e-12


@pytest.mark.parametrize("form", FORMS)
def test_symmetry_nonnegativity_zero_iff_equal(form):
    rng = np.random.default_rng(42)
    for _ in range(300):
        a = _random_gaussian(rng)
        b = _random_gaussian(rng)
        dab = wasserstein2_sq(a, b, form)
        dba = wasserstein2_sq(b, a, form)
        assert dab >= 0.0
        assert abs(dab - dba) < 1e-9 * max(1.0, dab)
        if dab < 1e-18:
            assert np.allclose(a.mean, b.mean, atol=1e-9)
            assert np.allclose(a.covariance, b.covariance, atol=1e-9)
        assert wasserstein2_sq(a, a, form) < 1e-12


def test_forms_agree_on_commuting_covariances():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        a = Gaussian2D(rng.uniform(-50, 50, size=2), np.diag(rng.uniform(0.5, 40.0, size=2)))
        b = Gaussian2D(rng.uniform(-50, 50, size=2), np.diag(rng.uniform(0.5, 40.0, size=2)))
        f = wasserstein2_sq(a, b, WassersteinForm.FROBENIUS)
        t = wasserstein2_sq(a, b, WassersteinForm.BURES_TRACE)
        assert abs(f - t) < 1e-10


def test_translation_invariance():
    rng = np.random.default_rng(5)
    cfg = MetricConfig()
    for _ in range(100):
        a = _random_gaussian(rng)
        b = _random_gaussian(rng)
        off = rng.uniform(-100, 100, size=2)
        a2 = Gaussian2D(a.mean + off, a.covariance)
        b2 = Gaussian2D(b.mean + off, b.covariance)
        for form in FORMS:
            assert abs(wasserstein2_sq(a, b, form) - wasserstein2_sq(a2, b2, form)) < 1e-12 * max(
                1.0, wasserstein2_sq(a, b, form))
        assert abs(normalized_wasserstein(a, b, cfg) - normalized_wasserstein(a2, b2, cfg)) < 1e-12


def test_normalized_wasserstein_values():
    cfg = MetricConfig(c_norm=10.0)
    g = Gaussian2D(np.array([100.0, 100.0]), np.diag([3.0, 7.0]))
    assert normalized_wasserstein(g, g, cfg) == 1.0
    moved = Gaussian2D(g.mean + np.array([10.0, 0.0]), g.covariance)
    assert abs(normalized_wasserstein(g, moved, cfg) - np.exp(-1.0)) < 1e-9
    assert abs(normalized_wasserstein(g, moved, cfg) - 0.36788) < 1e-5


def test_normalized_wasserstein_monotone_in_offset():
    cfg = MetricConfig(c_norm=10.0)
    g = Gaussian2D(np.zeros(2), np.diag([2.0, 2.0]))
    prev = 1.0
    for d in np.linspace(0.5, 60.0, 40):
        cur = normalized_wasserstein(g, Gaussian2D(np.array([d, 0.0]), g.covariance), cfg)
        assert 0.0 < cur < prev <= 1.0
        prev = cur


def test_offset_scaling_scales_root_distance():
    g = Gaussian2D(np.zeros(2), np.diag([4.0, 9.0]))
    base = np.sqrt(wasserstein2_sq(g, Gaussian2D(np.array([3.0, 4.0]), g.covariance)))
    for k in [2.0, 5.0, 10.0]:
        d = np.sqrt(wasserstein2_sq(g, Gaussian2D(k * np.array([3.0, 4.0]), g.covariance)))
        assert abs(d - k * base) < 1e-9


def test_metric_config_validation():
    with pytest.raises(ValueError):
        MetricConfig(c_norm=0.0)

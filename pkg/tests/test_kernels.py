import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paleofield import InvalidInput
from paleofield.kernels import (
    SpatialParams,
    TemporalParams,
    eval_spatial,
    eval_temporal,
    ou_state_space,
    spatial_gram,
)


def test_spatial_zero_distance():
    assert eval_spatial((3.0, 40.0), (3.0, 40.0), SpatialParams(5.0, 2.0)) == 1.0


def test_spatial_one_lengthscale_lon():
    p = SpatialParams(7.0, 3.0)
    expected = (1 + np.sqrt(3)) * np.exp(-np.sqrt(3))
    assert eval_spatial((0.0, 0.0), (7.0, 0.0), p) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(0.48335, abs=1e-5)


def test_spatial_fitted_lengthscales():
    p = SpatialParams(19.6, 13.2)
    v = eval_spatial((-5.0, 40.0), (14.6, 53.2), p)
    assert v == pytest.approx((1 + np.sqrt(6)) * np.exp(-np.sqrt(6)), rel=1e-12)
    assert v == pytest.approx(0.29782, abs=1e-5)


def test_spatial_rejects_nonfinite():
    with pytest.raises(InvalidInput):
        eval_spatial((np.nan, 0.0), (0.0, 0.0), SpatialParams(1.0, 1.0))


def test_params_validate():
    with pytest.raises(InvalidInput):
        SpatialParams(-1.0, 1.0)
    with pytest.raises(InvalidInput):
        TemporalParams(1.0, 0.0)


def test_temporal_values():
    p = TemporalParams(9.9, 2.9)
    assert eval_temporal(0.0, p) == pytest.approx(8.41, rel=1e-14)
    assert eval_temporal(9.9, p) == pytest.approx(8.41 * np.exp(-1), rel=1e-14)
    assert eval_temporal(9.9, p) == pytest.approx(3.0939, abs=1e-4)
    assert eval_temporal(-9.9, p) == eval_temporal(9.9, p)
    with pytest.raises(InvalidInput):
        eval_temporal(np.inf, p)


def test_gram_single_point_jitter():
    K = spatial_gram([[1.0, 2.0]], [[1.0, 2.0]], SpatialParams(1.0, 1.0), jitter=1e-6)
    np.testing.assert_allclose(K, [[1 + 1e-6]], rtol=0, atol=1e-15)


def test_gram_transpose_symmetry():
    rng = np.random.default_rng(0)
    X1, X2 = rng.uniform(-10, 10, (7, 2)), rng.uniform(-10, 10, (4, 2))
    p = SpatialParams(3.0, 5.0)
    np.testing.assert_array_equal(spatial_gram(X1, X2, p), spatial_gram(X2, X1, p).T)


def test_gram_entries_match_pointwise():
    rng = np.random.default_rng(1)
    X1, X2 = rng.uniform(-10, 10, (5, 2)), rng.uniform(-10, 10, (3, 2))
    p = SpatialParams(3.0, 5.0)
    K = spatial_gram(X1, X2, p)
    for i in range(5):
        for j in range(3):
            assert K[i, j] == pytest.approx(eval_spatial(X1[i], X2[j], p), rel=1e-14)


def test_self_gram_min_eigenvalue():
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 30, (20, 2))
    jitter = 1e-6
    K = spatial_gram(X, X, SpatialParams(19.6, 13.2), jitter=jitter)
    np.testing.assert_array_equal(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= jitter / 2


def test_ou_state_space_limits():
    ss = ou_state_space(TemporalParams(2.0, 1.5))
    assert ss.state_dim == 1
    np.testing.assert_array_equal(ss.emission, [[1.0]])
    np.testing.assert_array_equal(ss.transition(0.0), [[1.0]])
    np.testing.assert_array_equal(ss.process_noise(0.0), [[0.0]])
    assert ss.transition(100.0)[0, 0] == pytest.approx(0.0, abs=1e-20)
    assert ss.process_noise(100.0)[0, 0] == pytest.approx(2.25, rel=1e-15)
    with pytest.raises(InvalidInput):
        ss.transition(-0.1)
    with pytest.raises(InvalidInput):
        ss.process_noise(-0.1)


def test_ou_state_space_reproduces_kernel():
    p = TemporalParams(9.9, 2.9)
    ss = ou_state_space(p)
    H, Pinf = ss.emission, ss.stationary_cov
    rng = np.random.default_rng(3)
    for dt in rng.uniform(0, 50, 100):
        cov = (H @ ss.transition(dt) @ Pinf @ H.T)[0, 0]
        assert cov == pytest.approx(eval_temporal(dt, p), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    ell=st.floats(0.05, 50.0),
    sigma=st.floats(0.1, 10.0),
    frac=st.floats(0.0, 100.0),
)
def test_ou_stationarity(ell, sigma, frac):
    ss = ou_state_space(TemporalParams(ell, sigma))
    dt = frac * ell
    A, Q, P = ss.transition(dt), ss.process_noise(dt), ss.stationary_cov
    assert Q[0, 0] >= 0
    np.testing.assert_allclose(A @ P @ A.T + Q, P, rtol=0, atol=1e-12 * max(1.0, P[0, 0]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 50))
def test_product_gram_psd(seed, n):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-20, 40, (n, 2))
    t = rng.uniform(-21, -6, n)
    sp, tp = SpatialParams(19.6, 13.2), TemporalParams(9.9, 2.9)
    Kx = spatial_gram(X, X, sp, jitter=0.0)
    Kt = tp.sigma_f**2 * np.exp(-np.abs(t[:, None] - t[None, :]) / tp.ell_t)
    K = Kx * Kt
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * np.trace(K)


def test_spatial_monotone_in_radius():
    rng = np.random.default_rng(4)
    radii = np.sort(rng.uniform(0, 10, 200))
    p = SpatialParams(2.0, 3.0)
    vals = [eval_spatial((0.0, 0.0), (r * 2.0, 0.0), p) for r in radii]
    assert np.all(np.diff(vals) <= 0)
    assert all(0 < v <= 1 for v in vals)

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neurokalman.errors import ConfigError, NumericalError
from neurokalman.kalman_reference import (GaussianBelief, LinearGaussianModel, argmin_fusion,
                                          conjugate_posterior_1d, kf_predict, kf_update)


def lgm(A, H=None, Q=None, R=None):
    n = A.shape[0]
    return LinearGaussianModel(A, np.eye(n) if H is None else H, np.zeros((n, n)) if Q is None else Q,
                               np.eye(n) if R is None else R)


def test_predict_identity_unchanged(rng):
    b = GaussianBelief(rng.standard_normal(3), np.diag([1.0, 2.0, 3.0]))
    out = kf_predict(b, lgm(np.eye(3)), np.zeros(3))
    assert np.array_equal(out.mean, b.mean) and np.array_equal(out.cov, b.cov)


def test_predict_adds_process_noise():
    b = GaussianBelief(np.zeros(2), np.eye(2))
    out = kf_predict(b, lgm(np.eye(2), Q=np.eye(2)))
    assert np.array_equal(out.cov, 2 * np.eye(2))


def test_predict_matches_monte_carlo():
    rng = np.random.default_rng(7)
    A = np.array([[0.9, 0.2], [-0.1, 1.05]])
    Q = np.array([[0.3, 0.05], [0.05, 0.2]])
    model = lgm(A, Q=Q)
    b = GaussianBelief(np.array([1.0, -0.5]), np.array([[0.5, 0.1], [0.1, 0.4]]))
    n = 100_000
    x = rng.multivariate_normal(b.mean, b.cov, size=n)
    u = np.array([0.1, 0.0])
    for _ in range(5):
        b = kf_predict(b, model, u)
        x = x @ A.T + u + rng.multivariate_normal(np.zeros(2), Q, size=n)
    S = np.cov(x.T)
    # standard error of a sample covariance entry: sqrt((S_ii S_jj + S_ij^2) / n)
    se = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S ** 2) / n)
    assert np.all(np.abs(S - b.cov) < 3 * se)
    assert np.all(np.abs(x.mean(0) - b.mean) < 3 * np.sqrt(np.diag(S) / n))


def test_update_equal_variance_average():
    out = kf_update(GaussianBelief(np.zeros(1), np.eye(1)), lgm(np.eye(1)), np.array([2.0]))
    assert out.mean[0] == pytest.approx(1.0, abs=1e-15) and out.cov[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_update_uninformative_measurement(rng):
    b = GaussianBelief(rng.standard_normal(2), np.eye(2) * 2.0)
    out = kf_update(b, lgm(np.eye(2), R=np.eye(2) * 1e12), np.array([50.0, -50.0]))
    assert np.allclose(out.mean, b.mean, rtol=1e-6, atol=1e-6 * np.abs(b.mean).max())
    assert np.allclose(out.cov, b.cov, rtol=1e-6)


@given(st.floats(0.2, 1.8), st.floats(0.01, 3), st.floats(0.01, 3), st.floats(-3, 3), st.floats(0.05, 4),
       st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_two_step_filter_matches_conjugate_closed_form(a, q, r, m0, v0, ys):
    model = LinearGaussianModel(np.array([[a]]), np.eye(1), np.array([[q]]), np.array([[r]]))
    b = GaussianBelief(np.array([m0]), np.array([[v0]]))
    for y in ys:
        b = kf_update(kf_predict(b, model), model, np.array([y]))
    m, v = conjugate_posterior_1d(m0, v0, a, q, r, ys)
    assert abs(b.mean[0] - m) < 1e-10 and abs(b.cov[0, 0] - v) < 1e-10


def test_update_rejects_non_pd_innovation():
    b = GaussianBelief(np.zeros(2), np.zeros((2, 2)))
    with pytest.raises(NumericalError, match="positive definite"):
        kf_update(b, lgm(np.eye(2), R=np.zeros((2, 2))), np.zeros(2))


def test_model_validates_dims_and_psd():
    with pytest.raises(ConfigError):
        LinearGaussianModel(np.eye(2), np.eye(3), np.eye(2), np.eye(3)[:2, :2])
    with pytest.raises(ConfigError, match="positive semi-definite"):
        lgm(np.eye(2), Q=-np.eye(2))
    with pytest.raises(ConfigError, match="symmetric"):
        lgm(np.eye(2), Q=np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_predict_rejects_mismatched_belief():
    with pytest.raises(ConfigError):
        kf_predict(GaussianBelief(np.zeros(3), np.eye(3)), lgm(np.eye(2)))


def test_argmin_midpoint_and_limits(rng):
    m, r = rng.standard_normal(4), rng.standard_normal(4)
    P = np.diag(rng.uniform(0.5, 2, 4))
    assert np.allclose(argmin_fusion(GaussianBelief(m, P), r, P), (m + r) / 2, atol=1e-15)
    assert np.allclose(argmin_fusion(GaussianBelief(m, P), r, np.eye(4) * 1e-12), r, atol=1e-10)


def test_argmin_equals_kf_update_diagonal():
    rng = np.random.default_rng(3)
    for _ in range(100):
        d = int(rng.integers(1, 8))
        P, O = np.diag(rng.uniform(0.05, 5, d)), np.diag(rng.uniform(0.05, 5, d))
        m, y = rng.standard_normal(d), rng.standard_normal(d)
        kf = kf_update(GaussianBelief(m, P), LinearGaussianModel(np.eye(d), np.eye(d), np.zeros((d, d)), O), y)
        assert np.max(np.abs(argmin_fusion(GaussianBelief(m, P), y, O) - kf.mean)) < 1e-10


def test_argmin_rejects_full_covariance():
    with pytest.raises(ConfigError, match="diagonal"):
        argmin_fusion(GaussianBelief(np.zeros(2), np.array([[1.0, 0.1], [0.1, 1.0]])), np.zeros(2), np.eye(2))


@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_update_never_increases_covariance(seed, n):
    r = np.random.default_rng(seed)
    M = r.standard_normal((n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    N = r.standard_normal((n, n))
    R = N @ N.T + 0.1 * np.eye(n)
    H = r.standard_normal((n, n))
    b = GaussianBelief(r.standard_normal(n), P)
    out = kf_update(b, LinearGaussianModel(np.eye(n), H, np.zeros((n, n)), R), r.standard_normal(n))
    assert np.linalg.eigvalsh(P - out.cov).min() >= -1e-10


def test_zero_residual_keeps_mean(rng):
    H = rng.standard_normal((2, 3))
    b = GaussianBelief(rng.standard_normal(3), np.eye(3))
    out = kf_update(b, LinearGaussianModel(np.eye(3), H, np.zeros((3, 3)), np.eye(2)), H @ b.mean)
    assert np.allclose(out.mean, b.mean, atol=1e-14)


def test_argmin_rejects_non_positive_diagonal():
    with pytest.raises(ConfigError, match="positive diagonal"):
        argmin_fusion(GaussianBelief(np.zeros(2), np.diag([1.0, 0.0])), np.zeros(2), np.eye(2))

"""Linear-Gaussian Kalman filter used as a ground-truth oracle.

Also provides the precision-weighted fusion ``argmin_fusion`` whose minimiser
coincides with the Kalman posterior mean when H = I.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import ConfigError, NumericalError


@dataclass(frozen=True)
class LinearGaussianModel:
    A: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.Q.shape != (n, n):
            raise ConfigError(f"A {self.A.shape} and Q {self.Q.shape} must be {n}x{n}")
        m = self.H.shape[0]
        if self.H.shape != (m, n) or self.R.shape != (m, m):
            raise ConfigError(f"H {self.H.shape} / R {self.R.shape} inconsistent with state dim {n}")
        for name in ("Q", "R"):
            M = getattr(self, name)
            if not np.allclose(M, M.T):
                raise ConfigError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() < -1e-12:
                raise ConfigError(f"{name} must be positive semi-definite")


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


def kf_predict(belief: GaussianBelief, model: LinearGaussianModel, control=None) -> GaussianBelief:
    n = model.A.shape[0]
    if belief.mean.shape != (n,) or belief.cov.shape != (n, n):
        raise ConfigError(f"belief dims {belief.mean.shape}/{belief.cov.shape} do not match A {model.A.shape}")
    u = np.zeros(n) if control is None else np.asarray(control, dtype=np.float64)
    if u.shape != (n,):
        raise ConfigError(f"control has shape {u.shape}, expected ({n},)")
    mean = model.A @ belief.mean + u
    cov = model.A @ belief.cov @ model.A.T + model.Q
    return GaussianBelief(mean, 0.5 * (cov + cov.T))


def kf_update(belief: GaussianBelief, model: LinearGaussianModel, y) -> GaussianBelief:
    y = np.asarray(y, dtype=np.float64)
    H, R = model.H, model.R
    if y.shape != (H.shape[0],):
        raise ConfigError(f"measurement has shape {y.shape}, expected ({H.shape[0]},)")
    S = H @ belief.cov @ H.T + R
    try:
        factor = cho_factor(S)
    except LinAlgError as exc:
        raise NumericalError(
            f"innovation covariance is not positive definite (min eig {np.linalg.eigvalsh(S).min():.3e})"
        ) from exc
    # K = P H^T S^-1, computed as (S^-1 H P)^T with S symmetric
    K = cho_solve(factor, H @ belief.cov).T
    mean = belief.mean + K @ (y - H @ belief.mean)
    cov = (np.eye(belief.cov.shape[0]) - K @ H) @ belief.cov
    return GaussianBelief(mean, 0.5 * (cov + cov.T))


def argmin_fusion(prior: GaussianBelief, obs_mean, obs_cov) -> np.ndarray:
    """Minimiser of 0.5|z - m|^2 over the prior precision plus 0.5|z - r|^2 over the observation precision.

    Restricted to diagonal covariances: the result is the per-coordinate
    precision-weighted average (P^-1 + O^-1)^-1 (P^-1 m + O^-1 r).
    """
    obs_mean = np.asarray(obs_mean, dtype=np.float64)
    obs_cov = np.asarray(obs_cov, dtype=np.float64)
    p = np.diag(prior.cov)
    o = np.diag(obs_cov)
    for name, M, diag in (("prior", prior.cov, p), ("observation", obs_cov, o)):
        if not np.array_equal(M, np.diag(diag)):
            raise ConfigError(f"{name} covariance must be diagonal")
        if np.any(diag <= 0):
            raise ConfigError(f"{name} covariance must have positive diagonal entries")
    prec_p = 1.0 / p
    prec_o = 1.0 / o
    return (prec_p * prior.mean + prec_o * obs_mean) / (prec_p + prec_o)


def conjugate_posterior_1d(prior_mean: float, prior_var: float, a: float, q: float, r: float, ys):
    """Closed-form posterior for x_t = a x_{t-1} + w, y_t = x_t + v by direct Gaussian algebra.

    Multiplies the predicted density with each likelihood in natural
    (precision) parameters; shares no code with ``kf_update``.
    """
    m, v = float(prior_mean), float(prior_var)
    for y in ys:
        m, v = a * m, a * a * v + q
        prec = 1.0 / v + 1.0 / r
        eta = m / v + y / r
        m, v = eta / prec, 1.0 / prec
    return m, v

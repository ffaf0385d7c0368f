"""Learnable Kalman gain and the gated fusion of prior and measurement.

K = sigmoid(W_g [r - z~ ; conf_proj(sigma)] + b_g)
z = (1 - K) * z~ + K * r  ==  z~ + K * (r - z~)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError
from .nn_core import (ParamSet, dense_backward, dense_forward, init_dense, init_mlp,
                      mlp_backward, mlp_forward)

FUSION_IDENTITY_TOL = 1e-12
# flipped off by callers that want the release-mode fast path
CHECK_FUSION_IDENTITY = __debug__


@dataclass(frozen=True)
class GainVector:
    k: np.ndarray


@dataclass(frozen=True)
class CorrectionOutput:
    z_post: np.ndarray
    gain: GainVector
    residual: np.ndarray


def conf_spec(cfg: ModelConfig):
    return [(cfg.conf_hidden, "tanh"), (cfg.latent_dim, "identity")]


def init_params(params: ParamSet, cfg: ModelConfig, rng) -> None:
    init_mlp(params, "gain.conf_proj", 1, conf_spec(cfg), rng)
    init_dense(params, "gain.gate", 2 * cfg.latent_dim, cfg.latent_dim, rng)


def gain_forward(params: ParamSet, cfg: ModelConfig, residual, sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == residual.ndim - 1:
        sigma = sigma[..., None]
    phi, c_phi = mlp_forward(params, sigma, conf_spec(cfg), "gain.conf_proj", return_cache=True)
    if phi.shape != residual.shape:
        raise ConfigError(f"confidence projection {phi.shape} != residual {residual.shape}")
    k, c_g = dense_forward(params, "gain.gate", np.concatenate([residual, phi], axis=-1), "sigmoid")
    return k, (c_phi, c_g)


def gain_backward(params: ParamSet, cfg: ModelConfig, cache, dk, grads: ParamSet):
    """Returns (d_residual, d_sigma)."""
    c_phi, c_g = cache
    dgin = dense_backward(params, "gain.gate", c_g, dk, grads)
    d = cfg.latent_dim
    dsig = mlp_backward(params, c_phi, dgin[..., d:], conf_spec(cfg), "gain.conf_proj", grads)
    return dgin[..., :d], dsig


def compute_gain(params: ParamSet, cfg: ModelConfig, residual, sigma: float) -> GainVector:
    k, _ = gain_forward(params, cfg, np.asarray(residual, dtype=np.float64), np.array([sigma]))
    return GainVector(k)


def fixed_gain(value: float, dim: int) -> GainVector:
    if not 0.0 < value < 1.0:
        raise ConfigError(f"fixed gain must lie in (0, 1), got {value}")
    return GainVector(np.full(dim, float(value)))


def fuse(z_tilde, r, gain: GainVector | np.ndarray) -> CorrectionOutput:
    k = gain.k if isinstance(gain, GainVector) else np.asarray(gain, dtype=np.float64)
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if z_tilde.shape != r.shape:
        raise ConfigError(f"prior shape {z_tilde.shape} != measurement shape {r.shape}")
    residual = r - z_tilde
    z_post = z_tilde + k * residual
    if CHECK_FUSION_IDENTITY:
        convex = (1.0 - k) * z_tilde + k * r
        scale = np.maximum(1.0, np.maximum(np.abs(z_tilde), np.abs(r)))
        if np.any(np.abs(convex - z_post) > FUSION_IDENTITY_TOL * scale):
            raise AssertionError("convex and residual forms of the fusion disagree")
    return CorrectionOutput(z_post=z_post, gain=GainVector(np.broadcast_to(k, z_post.shape)), residual=residual)

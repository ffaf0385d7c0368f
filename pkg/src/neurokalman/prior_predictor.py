"""Prediction block: blind dead-reckoning prior over the latent state.

h_t = GRU([z_{t-1}, embed(w_{t-1})], h_{t-1}),  z~_t = MLP_prior(h_t).
At t = 0 the state is seeded from the first measurement: z_0 = r_0 and
h_0 = tanh(W z_0 + b).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .nn_core import (ParamSet, dense_backward, dense_forward, gru_backward, gru_step,
                      init_dense, init_gru, init_mlp, mlp_backward, mlp_forward)


@dataclass(frozen=True)
class PriorState:
    h: np.ndarray
    z_tilde: np.ndarray


def prior_mlp_spec(cfg: ModelConfig):
    return [(cfg.prior_hidden, "tanh"), (cfg.latent_dim, "identity")]


def h0_spec(cfg: ModelConfig):
    return [(cfg.gru_hidden, "tanh")]


def init_params(params: ParamSet, cfg: ModelConfig, rng) -> None:
    init_dense(params, "prior.embed", 3, cfg.waypoint_embed, rng)
    init_gru(params, "prior.gru", cfg.latent_dim + cfg.waypoint_embed, cfg.gru_hidden, rng)
    init_mlp(params, "prior.mlp", cfg.gru_hidden, prior_mlp_spec(cfg), rng)
    init_mlp(params, "prior.h0", cfg.latent_dim, h0_spec(cfg), rng)


def init_prior(params: ParamSet, cfg: ModelConfig, r0) -> PriorState:
    """Seed the recursion from the first measurement vector ``r0``."""
    z0 = np.asarray(r0, dtype=np.float64)
    h0 = mlp_forward(params, z0, h0_spec(cfg), "prior.h0")
    return PriorState(h=h0, z_tilde=z0.copy())


def predict_prior(params: ParamSet, cfg: ModelConfig, prev: PriorState, z_prev, w_prev) -> PriorState:
    """Advance the prior one step. Never sees the current observation.

    ``w_prev`` is the executed displacement, in units of the step length.
    """
    out, _ = predict_forward(params, cfg, prev.h, z_prev, w_prev)
    return out


def predict_forward(params: ParamSet, cfg: ModelConfig, h_prev, z_prev, w_prev):
    e, c_e = dense_forward(params, "prior.embed", np.asarray(w_prev, dtype=np.float64))
    x = np.concatenate([np.asarray(z_prev, dtype=np.float64), e], axis=-1)
    h, c_g = gru_step(params, x, h_prev, "prior.gru", return_cache=True)
    zt, c_p = mlp_forward(params, h, prior_mlp_spec(cfg), "prior.mlp", return_cache=True)
    return PriorState(h=h, z_tilde=zt), (c_e, c_g, c_p)


def predict_backward(params: ParamSet, cfg: ModelConfig, cache, dz_tilde, dh, grads: ParamSet):
    """Returns (dz_prev, dh_prev); accumulates parameter gradients into ``grads``."""
    c_e, c_g, c_p = cache
    dh = dh + mlp_backward(params, c_p, dz_tilde, prior_mlp_spec(cfg), "prior.mlp", grads)
    dx, dh_prev = gru_backward(params, c_g, dh, "prior.gru", grads)
    d = cfg.latent_dim
    dense_backward(params, "prior.embed", c_e, dx[..., d:], grads)
    return dx[..., :d], dh_prev


def h0_forward(params: ParamSet, cfg: ModelConfig, z0):
    return mlp_forward(params, z0, h0_spec(cfg), "prior.h0", return_cache=True)


def h0_backward(params: ParamSet, cfg: ModelConfig, cache, dh0, grads: ParamSet):
    return mlp_backward(params, cache, dh0, h0_spec(cfg), "prior.h0", grads)

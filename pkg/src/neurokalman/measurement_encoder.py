"""Update block stand-in: map (feature, retrieved evidence, goal, position) to
a latent measurement r_t and a confidence sigma_t in [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError
from .kde_retrieval import RetrievalResult
from .nn_core import ParamSet, init_mlp, mlp_backward, mlp_forward


@dataclass(frozen=True)
class Observation:
    position: np.ndarray
    local_feature: np.ndarray
    goal_embed: np.ndarray


@dataclass(frozen=True)
class Measurement:
    r: np.ndarray
    sigma: float
    feature: np.ndarray


def trunk_spec(cfg: ModelConfig):
    return [(cfg.enc_hidden, "tanh"), (cfg.enc_hidden, "tanh")]


def input_dim(feature_dim: int, goal_dim: int) -> int:
    return 2 * feature_dim + goal_dim + 3


def init_params(params: ParamSet, cfg: ModelConfig, feature_dim: int, goal_dim: int, rng) -> None:
    init_mlp(params, "enc.trunk", input_dim(feature_dim, goal_dim), trunk_spec(cfg), rng)
    init_mlp(params, "enc.r", cfg.enc_hidden, [(cfg.latent_dim, "identity")], rng)
    init_mlp(params, "enc.sigma", cfg.enc_hidden, [(1, "sigmoid")], rng)


def encoder_input(local_feature, evidence, goal_embed, position, pos_scale: float):
    """Concatenate raw feature, retrieved evidence, goal embedding and scaled position."""
    f = np.asarray(local_feature, dtype=np.float64)
    e = np.asarray(evidence, dtype=np.float64)
    if f.shape != e.shape:
        raise ConfigError(f"feature shape {f.shape} != evidence shape {e.shape}")
    return np.concatenate([f, e, np.asarray(goal_embed, dtype=np.float64),
                           np.asarray(position, dtype=np.float64) / pos_scale], axis=-1)


def encode_forward(params: ParamSet, cfg: ModelConfig, enc_in):
    a, c_t = mlp_forward(params, enc_in, trunk_spec(cfg), "enc.trunk", return_cache=True)
    r, c_r = mlp_forward(params, a, [(cfg.latent_dim, "identity")], "enc.r", return_cache=True)
    s, c_s = mlp_forward(params, a, [(1, "sigmoid")], "enc.sigma", return_cache=True)
    return r, s, (c_t, c_r, c_s)


def encode_backward(params: ParamSet, cfg: ModelConfig, cache, dr, ds, grads: ParamSet):
    c_t, c_r, c_s = cache
    da = mlp_backward(params, c_r, dr, [(cfg.latent_dim, "identity")], "enc.r", grads)
    da = da + mlp_backward(params, c_s, ds, [(1, "sigmoid")], "enc.sigma", grads)
    return mlp_backward(params, c_t, da, trunk_spec(cfg), "enc.trunk", grads)


def encode(params: ParamSet, cfg: ModelConfig, obs: Observation, retrieval: RetrievalResult,
           pos_scale: float = 100.0) -> Measurement:
    enc_in = encoder_input(obs.local_feature, retrieval.evidence, obs.goal_embed, obs.position, pos_scale)
    r, s, _ = encode_forward(params, cfg, enc_in)
    return Measurement(r=r, sigma=float(s[0]), feature=np.array(obs.local_feature, dtype=np.float64))

"""The assembled filter: prior predictor, measurement encoder, gain and fusion,
plus the waypoint head shared by the posterior, prior and measurement.

Everything is batched over episodes (leading axis B). A step returns its
outputs plus a cache; ``backward_step`` runs one step of backprop-through-time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kalman_correction as kc
from . import measurement_encoder as enc
from . import prior_predictor as pp
from .config import ModelConfig
from .errors import ConfigError
from .nn_core import ParamSet, init_mlp, mlp_backward, mlp_forward

HEAD_PREFIX = "head"


def head_spec(cfg: ModelConfig):
    return [(cfg.head_hidden, "tanh"), (3, "identity")]


@dataclass
class StepOut:
    z: np.ndarray
    z_tilde: np.ndarray
    r: np.ndarray
    sigma: np.ndarray
    gain: np.ndarray
    h: np.ndarray
    w_post: np.ndarray
    w_prior: np.ndarray
    w_meas: np.ndarray


class NeuroKalman:
    def __init__(self, cfg: ModelConfig, feature_dim: int, goal_dim: int, params: ParamSet | None = None):
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.goal_dim = goal_dim
        self.params = params if params is not None else self.init_params(cfg.init_seed)

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng(seed)
        params = ParamSet()
        pp.init_params(params, self.cfg, rng)
        enc.init_params(params, self.cfg, self.feature_dim, self.goal_dim, rng)
        kc.init_params(params, self.cfg, rng)
        init_mlp(params, HEAD_PREFIX, self.cfg.latent_dim, head_spec(self.cfg), rng)
        return params

    def meta(self) -> dict:
        from dataclasses import asdict
        return {"model": asdict(self.cfg), "feature_dim": self.feature_dim, "goal_dim": self.goal_dim}

    # ------------------------------------------------------------ pieces

    def waypoint_head(self, z):
        return mlp_forward(self.params, z, head_spec(self.cfg), HEAD_PREFIX)

    def _head(self, z):
        return mlp_forward(self.params, z, head_spec(self.cfg), HEAD_PREFIX, return_cache=True)

    def _head_back(self, cache, dw, grads):
        return mlp_backward(self.params, cache, dw, head_spec(self.cfg), HEAD_PREFIX, grads)

    def _gain(self, residual, sigma, gain_override):
        if gain_override is not None:
            return np.broadcast_to(np.asarray(gain_override, dtype=np.float64), residual.shape), None
        mode = self.cfg.gain_mode
        if mode == "zero":
            return np.zeros_like(residual), None
        if mode == "fixed":
            return np.full_like(residual, self.cfg.fixed_gain), None
        if mode == "learnable":
            return kc.gain_forward(self.params, self.cfg, residual, sigma)
        raise ConfigError(f"unknown gain mode {mode!r}")

    # ------------------------------------------------------------ steps

    def first_step(self, enc_in):
        """t = 0: z_0 = z~_0 = r_0, h_0 = tanh-MLP(z_0)."""
        r, s, c_enc = enc.encode_forward(self.params, self.cfg, enc_in)
        h0, c_h0 = pp.h0_forward(self.params, self.cfg, r)
        w, c_head = self._head(r)
        out = StepOut(z=r, z_tilde=r, r=r, sigma=s[..., 0], gain=np.ones_like(r), h=h0,
                      w_post=w, w_prior=w, w_meas=w)
        return out, ("first", c_enc, c_h0, c_head)

    def next_step(self, z_prev, h_prev, w_prev, enc_in, gain_override=None):
        prior, c_prior = pp.predict_forward(self.params, self.cfg, h_prev, z_prev, w_prev)
        zt = prior.z_tilde
        r, s, c_enc = enc.encode_forward(self.params, self.cfg, enc_in)
        res = r - zt
        k, c_gain = self._gain(res, s, gain_override)
        z = zt + k * res
        w_post, c1 = self._head(z)
        w_prior, c2 = self._head(zt)
        w_meas, c3 = self._head(r)
        out = StepOut(z=z, z_tilde=zt, r=r, sigma=s[..., 0], gain=k, h=prior.h,
                      w_post=w_post, w_prior=w_prior, w_meas=w_meas)
        return out, ("next", c_prior, c_enc, c_gain, k, res, (c1, c2, c3))

    def backward_step(self, cache, dw_post, dw_prior, dw_meas, dz_next, dh_next, grads: ParamSet):
        """Backprop one step; returns (dz_prev, dh_prev), both None for the first step."""
        if cache[0] == "first":
            _, c_enc, c_h0, c_head = cache
            dr = self._head_back(c_head, dw_post + dw_prior + dw_meas, grads)
            dr = dr + dz_next + pp.h0_backward(self.params, self.cfg, c_h0, dh_next, grads)
            enc.encode_backward(self.params, self.cfg, c_enc, dr, np.zeros(dr.shape[:-1] + (1,)), grads)
            return None, None
        _, c_prior, c_enc, c_gain, k, res, (c1, c2, c3) = cache
        dz = self._head_back(c1, dw_post, grads) + dz_next
        dzt = self._head_back(c2, dw_prior, grads) + dz * (1.0 - k)
        dr = self._head_back(c3, dw_meas, grads) + dz * k
        ds = np.zeros(dr.shape[:-1] + (1,))
        if c_gain is not None:
            dres, ds = kc.gain_backward(self.params, self.cfg, c_gain, dz * res, grads)
            dr = dr + dres
            dzt = dzt - dres
        enc.encode_backward(self.params, self.cfg, c_enc, dr, ds, grads)
        return pp.predict_backward(self.params, self.cfg, c_prior, dzt, dh_next, grads)


# ---------------------------------------------------------------- losses

def step_l1(out: StepOut, w_star, mask, aux_coeff: float, norm: float):
    """Masked L1 supervision of all three heads for one batched step.

    Returns (main_sum, aux_sum, dw_post, dw_prior, dw_meas); the gradients are
    of (main + aux_coeff * aux) / norm.
    """
    m = np.asarray(mask, dtype=np.float64)[:, None]
    d_post = out.w_post - w_star
    d_prior = out.w_prior - w_star
    d_meas = out.w_meas - w_star
    main = float((m * np.abs(d_post)).sum())
    aux = float((m * (np.abs(d_prior) + np.abs(d_meas))).sum())
    g = m / norm
    return main, aux, g * np.sign(d_post), aux_coeff * g * np.sign(d_prior), aux_coeff * g * np.sign(d_meas)


@dataclass
class WindowRecord:
    """Inputs of a (truncated) BPTT window, replayable for gradient checks.

    ``start`` is None when the window begins at t = 0, else the detached (z, h).
    Each step holds (w_prev, enc_in, w_star, mask); w_prev is ignored at t = 0.
    """
    start: tuple[np.ndarray, np.ndarray] | None
    steps: list


def window_loss(model: NeuroKalman, rec: WindowRecord, aux_coeff: float, gain_override=None,
                need_grad: bool = True):
    """Forward + backward over a recorded window; returns (loss, main, aux, grads)."""
    caches, labels = [], []
    z, h = (None, None) if rec.start is None else rec.start
    norm = max(sum(float(np.sum(s[3])) for s in rec.steps), 1.0)
    main_tot = aux_tot = 0.0
    for i, (w_prev, enc_in, w_star, mask) in enumerate(rec.steps):
        if i == 0 and rec.start is None:
            out, cache = model.first_step(enc_in)
        else:
            out, cache = model.next_step(z, h, w_prev, enc_in, gain_override)
        main, aux, *dws = step_l1(out, w_star, mask, aux_coeff, norm)
        main_tot += main
        aux_tot += aux
        caches.append(cache)
        labels.append(dws)
        z, h = out.z, out.h
    loss = (main_tot + aux_coeff * aux_tot) / norm
    grads = None
    if need_grad:
        grads = model.params.zeros_like()
        backprop_window(model, caches, labels, grads)
    return loss, main_tot / norm, aux_tot / norm, grads


def backprop_window(model: NeuroKalman, caches, labels, grads: ParamSet) -> None:
    dz = dh = 0.0
    for cache, (dwp, dwt, dwm) in zip(reversed(caches), reversed(labels)):
        dz, dh = model.backward_step(cache, dwp, dwt, dwm, dz, dh, grads)

"""Property suite behind ``neurokalman verify``.

Each check returns a PropertyResult; ``run_suite`` runs them all. A mutation
(for example a corrupted attention scale) can be injected to confirm that the
suite actually detects a broken implementation.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import kalman_correction as kc
from . import measurement_encoder as enc
from . import prior_predictor as pp
from .config import ModelConfig
from .drift_lab import contraction_check, fit_growth
from .kalman_reference import (GaussianBelief, LinearGaussianModel, argmin_fusion, conjugate_posterior_1d,
                               kf_predict, kf_update)
from .kde_retrieval import nw_oracle, retrieve
from .memory_bank import MemoryBank
from .model import NeuroKalman, WindowRecord, window_loss
from .nn_core import (ParamSet, attention, attention_backward, grad_check, gru_backward, gru_step,
                      init_gru, init_mlp, input_grad_check, mlp_backward, mlp_forward)

MUTATIONS = ("attention-scale",)


@dataclass
class PropertyResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": self.value,
                "tolerance": self.tolerance, "detail": self.detail, "seconds": round(self.seconds, 3)}


def _timed(fn):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------- retrieval

@_timed
def check_kde_attention(n: int = 1000, seed: int = 0, mutate: bool = False) -> PropertyResult:
    """Softmax attention retrieval vs the explicit Nadaraya-Watson loop."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        N = int(rng.integers(1, 65))
        d = int(rng.integers(1, 33))
        keys = rng.standard_normal((N, d)) * rng.uniform(0.1, 3.0)
        q = rng.standard_normal(d) * rng.uniform(0.1, 3.0)
        scale = 1.5 / math.sqrt(d) if mutate else None
        got = retrieve(q, keys, scale=scale).evidence
        want = nw_oracle(q, keys, keys)
        worst = max(worst, float(np.max(np.abs(got - want))))
    return PropertyResult("kde_equals_attention", worst < 1e-10, worst, 1e-10, f"{n} instances")


@_timed
def check_empty_memory() -> PropertyResult:
    q = np.array([0.3, -1.2, 2.0])
    ok = True
    for bank in (None, MemoryBank(5, 0.5), np.zeros((0, 3))):
        res = retrieve(q, bank)
        ok &= bool(np.array_equal(res.evidence, q)) and not res.used_memory and res.evidence is not q
    return PropertyResult("empty_memory_fallback", ok, 0.0 if ok else 1.0, 0.0, "evidence = query copy")


# ---------------------------------------------------------------- fusion

@_timed
def check_fusion_identity(n: int = 10_000, seed: int = 0) -> PropertyResult:
    """(1 - K) z~ + K r against z~ + K (r - z~)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(1, 33))
        zt = rng.uniform(-10, 10, d)
        r = rng.uniform(-10, 10, d)
        k = rng.uniform(0, 1, d)
        convex = (1.0 - k) * zt + k * r
        resid = kc.fuse(zt, r, k).z_post
        worst = max(worst, float(np.max(np.abs(convex - resid))))
    return PropertyResult("fusion_identity", worst < 1e-12, worst, 1e-12, f"{n} triples")


# ---------------------------------------------------------------- Kalman oracle

@_timed
def check_kalman_1d(seed: int = 0) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(100):
        a, q, r = rng.uniform(0.5, 1.5), rng.uniform(0.01, 2), rng.uniform(0.01, 2)
        m0, v0 = rng.normal(), rng.uniform(0.1, 3)
        ys = rng.normal(size=2)
        model = LinearGaussianModel(np.array([[a]]), np.eye(1), np.array([[q]]), np.array([[r]]))
        b = GaussianBelief(np.array([m0]), np.array([[v0]]))
        for y in ys:
            b = kf_update(kf_predict(b, model), model, np.array([y]))
        m, v = conjugate_posterior_1d(m0, v0, a, q, r, ys)
        worst = max(worst, abs(float(b.mean[0]) - m), abs(float(b.cov[0, 0]) - v))
    return PropertyResult("kalman_1d_two_step", worst < 1e-10, worst, 1e-10, "100 random 1D systems")


@_timed
def check_argmin_fusion(n: int = 100, seed: int = 0) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(1, 9))
        P = np.diag(rng.uniform(0.05, 5, d))
        O = np.diag(rng.uniform(0.05, 5, d))
        m, y = rng.normal(size=d), rng.normal(size=d)
        prior = GaussianBelief(m, P)
        model = LinearGaussianModel(np.eye(d), np.eye(d), np.zeros((d, d)), O)
        kf = kf_update(prior, model, y).mean
        worst = max(worst, float(np.max(np.abs(argmin_fusion(prior, y, O) - kf))))
    return PropertyResult("argmin_fusion_equals_kf", worst < 1e-10, worst, 1e-10, f"{n} diagonal cases")


# ---------------------------------------------------------------- contraction

@_timed
def check_contraction() -> PropertyResult:
    tr = contraction_check(1.1, 0.5, 0.1, 1.0, 100)
    fp = 0.1 * 0.5 / (1 - 0.5 * 1.1)
    conv = abs(tr.epsilon[100] - fp)
    grow = contraction_check(1.1, 0.0, 0.1, 1.0, 100)
    ratio_err = abs(fit_growth(grow.epsilon) - 1.1)
    ok = conv < 1e-6 and ratio_err < 1e-6 and grow.diverged and not tr.diverged
    return PropertyResult("contraction_recursion", ok, max(conv, ratio_err), 1e-6,
                          f"|eps_100 - fp| = {conv:.2e}, |ratio - lambda| = {ratio_err:.2e}")


# ---------------------------------------------------------------- metrics

@_timed
def check_metric_invariants(seed: int = 0) -> PropertyResult:
    from .sim_env import Episode, World, compute_metrics

    rng = np.random.default_rng(seed)
    target = np.zeros(3)

    def episode(final_offset, extra_points=()):
        start = np.array([100.0, 0.0, 0.0])
        w = World(landmarks=np.zeros((0, 3)), target=target, start=start,
                  path=np.stack([start, target]), seed=0, difficulty="easy")
        pos = np.vstack([start, *extra_points, target + final_offset])
        return Episode(world=w, agent_positions=pos, executed_waypoints=np.diff(pos, axis=0),
                       observations=[], horizon=10)

    at = compute_metrics([episode(np.array([20.0, 0.0, 0.0]))], 20.0)
    inside = compute_metrics([episode(np.array([np.nextafter(20.0, 0.0), 0.0, 0.0]))], 20.0)
    boundary_ok = at.sr == 0.0 and inside.sr == 1.0
    ok = boundary_ok
    for _ in range(200):
        eps = []
        for _ in range(int(rng.integers(1, 8))):
            via = [rng.uniform(-150, 150, 3) for _ in range(int(rng.integers(0, 4)))]
            eps.append(episode(rng.uniform(-40, 40, 3), via))
        rep = compute_metrics(eps, 20.0)
        ok &= rep.sr <= rep.osr and rep.spl <= rep.sr
    return PropertyResult("metric_invariants", bool(ok), 0.0 if ok else 1.0, 0.0,
                          "SR <= OSR, SPL <= SR; final distance exactly 20 m is not a success")


# ---------------------------------------------------------------- memory

@_timed
def check_memory_policy(n: int = 10_000, seed: int = 0, max_len: int = 40) -> PropertyResult:
    rng = np.random.default_rng(seed)
    specials = np.array([0.5, np.nextafter(0.5, 0.0), np.nextafter(0.5, 1.0), 0.0, 1.0, np.nan, np.inf, -np.inf])
    violations = 0
    for _ in range(n):
        cap = int(rng.integers(1, 21))
        bank = MemoryBank(cap, 0.5)
        for t in range(int(rng.integers(1, max_len + 1))):
            sig = specials[rng.integers(len(specials))] if rng.random() < 0.3 else rng.random()
            bank.try_store(rng.standard_normal(3), t, float(sig))
            if len(bank) > cap or any(not a.confidence > 0.5 for a in bank.anchors):
                violations += 1
                break
    return PropertyResult("memory_policy", violations == 0, float(violations), 0.0, f"{n} random sequences")


# ---------------------------------------------------------------- gradients

def gru_block(seed: int = 0):
    rng = np.random.default_rng(seed)
    params = ParamSet()
    init_gru(params, "gru", 5, 4, rng)
    probe = (rng.standard_normal((3, 5)), rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))

    def block(p, pr):
        x, h, c = pr
        out, cache = gru_step(p, x, h, "gru", return_cache=True)
        g = p.zeros_like()
        gru_backward(p, cache, c, "gru", g)
        return float(np.sum(c * out)), g
    return block, params, probe


def mlp_block(seed: int = 0):
    rng = np.random.default_rng(seed)
    spec = [(5, "tanh"), (4, "sigmoid"), (3, "identity")]
    params = ParamSet()
    init_mlp(params, "mlp", 6, spec, rng)
    probe = (rng.standard_normal((4, 6)), rng.standard_normal((4, 3)))

    def block(p, pr):
        x, c = pr
        out, caches = mlp_forward(p, x, spec, "mlp", return_cache=True)
        g = p.zeros_like()
        mlp_backward(p, caches, c, spec, "mlp", g)
        return float(np.sum(c * out)), g
    return block, params, probe


SMALL = ModelConfig(latent_dim=6, gru_hidden=5, prior_hidden=5, waypoint_embed=3, enc_hidden=7,
                    conf_hidden=4, head_hidden=5)


def prior_block(seed: int = 0, cfg: ModelConfig = SMALL):
    rng = np.random.default_rng(seed)
    params = ParamSet()
    pp.init_params(params, cfg, rng)
    d, H = cfg.latent_dim, cfg.gru_hidden
    probe = (rng.standard_normal((2, H)), rng.standard_normal((2, d)), rng.standard_normal((2, 3)),
             rng.standard_normal((2, d)), rng.standard_normal((2, H)), rng.standard_normal((2, H)))

    def block(p, pr):
        h, z, w, cz, ch, c0 = pr
        st, cache = pp.predict_forward(p, cfg, h, z, w)
        h0, c_h0 = pp.h0_forward(p, cfg, z)
        g = p.zeros_like()
        pp.predict_backward(p, cfg, cache, cz, ch, g)
        pp.h0_backward(p, cfg, c_h0, c0, g)
        return float(np.sum(cz * st.z_tilde) + np.sum(ch * st.h) + np.sum(c0 * h0)), g
    return block, params, probe


def encoder_block(seed: int = 0, cfg: ModelConfig = SMALL, feature_dim: int = 4, goal_dim: int = 4):
    rng = np.random.default_rng(seed)
    params = ParamSet()
    enc.init_params(params, cfg, feature_dim, goal_dim, rng)
    n_in = enc.input_dim(feature_dim, goal_dim)
    probe = (rng.standard_normal((3, n_in)), rng.standard_normal((3, cfg.latent_dim)), rng.standard_normal((3, 1)))

    def block(p, pr):
        x, cr, cs = pr
        r, s, cache = enc.encode_forward(p, cfg, x)
        g = p.zeros_like()
        enc.encode_backward(p, cfg, cache, cr, cs, g)
        return float(np.sum(cr * r) + np.sum(cs * s)), g
    return block, params, probe


def gain_block(seed: int = 0, cfg: ModelConfig = SMALL):
    rng = np.random.default_rng(seed)
    params = ParamSet()
    kc.init_params(params, cfg, rng)
    d = cfg.latent_dim
    probe = (rng.standard_normal((3, d)), rng.uniform(0, 1, 3), rng.standard_normal((3, d)))

    def block(p, pr):
        res, sig, c = pr
        k, cache = kc.gain_forward(p, cfg, res, sig)
        g = p.zeros_like()
        kc.gain_backward(p, cfg, cache, c, g)
        return float(np.sum(c * k)), g
    return block, params, probe


def head_block(seed: int = 0, cfg: ModelConfig = SMALL):
    from .model import HEAD_PREFIX, head_spec

    rng = np.random.default_rng(seed)
    params = ParamSet()
    init_mlp(params, HEAD_PREFIX, cfg.latent_dim, head_spec(cfg), rng)
    probe = (rng.standard_normal((3, cfg.latent_dim)), rng.standard_normal((3, 3)))

    def block(p, pr):
        z, c = pr
        out, caches = mlp_forward(p, z, head_spec(cfg), HEAD_PREFIX, return_cache=True)
        g = p.zeros_like()
        mlp_backward(p, caches, c, head_spec(cfg), HEAD_PREFIX, g)
        return float(np.sum(c * out)), g
    return block, params, probe


def _heads(model, rec):
    """Forward a window, returning the (post, prior, meas) predictions per step."""
    outs = []
    z, h = (None, None) if rec.start is None else rec.start
    for i, (w_prev, enc_in, _, _) in enumerate(rec.steps):
        out, _ = model.first_step(enc_in) if i == 0 and rec.start is None else model.next_step(z, h, w_prev, enc_in)
        outs.append(out)
        z, h = out.z, out.h
    return outs


def composed_block(seed: int = 0, cfg: ModelConfig = SMALL, with_start: bool = False, steps: int = 4,
                   aux_coeff: float = 0.2, margin: float = 0.05):
    """Full window loss (three L1 heads through prior, encoder, gain and fusion).

    Labels are drawn at least ``margin`` away from every head's initial
    prediction, so a 1e-5 probe never crosses an L1 kink.
    """
    rng = np.random.default_rng(seed)
    F, G, B = 4, 4, 2
    model = NeuroKalman(cfg, F, G)
    model.params = model.init_params(seed)
    n_in = enc.input_dim(F, G)
    start = (rng.standard_normal((B, cfg.latent_dim)), np.tanh(rng.standard_normal((B, cfg.gru_hidden)))) \
        if with_start else None
    recs = [[rng.uniform(-1, 1, (B, 3)), rng.standard_normal((B, n_in)), None,
             (rng.random(B) < 0.8).astype(np.float64)] for _ in range(steps)]
    rec = WindowRecord(start, [tuple(s) for s in recs])
    outs = _heads(model, rec)
    for s, out in zip(recs, outs):
        w = rng.uniform(-1, 1, (B, 3))
        for _ in range(1000):
            near = np.zeros(w.shape, dtype=bool)
            for pred in (out.w_post, out.w_prior, out.w_meas):
                near |= np.abs(pred - w) < margin
            if not near.any():
                break
            w[near] = rng.uniform(-1, 1, int(near.sum()))
        s[2] = w
    rec = WindowRecord(start, [tuple(s) for s in recs])

    def block(p, pr):
        saved = model.params
        model.params = p
        try:
            loss, _, _, grads = window_loss(model, pr, aux_coeff)
        finally:
            model.params = saved
        return loss, grads
    return block, model.params, rec


GRAD_BLOCKS = {
    "gru": gru_block,
    "mlp": mlp_block,
    "prior_predictor": prior_block,
    "measurement_encoder": encoder_block,
    "gain": gain_block,
    "waypoint_head": head_block,
    "composed_loss_first_window": lambda seed=0: composed_block(seed, with_start=False),
    "composed_loss_later_window": lambda seed=0: composed_block(seed, with_start=True),
}


def attention_input_check(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    q, K, V, c = rng.standard_normal(5), rng.standard_normal((6, 5)), rng.standard_normal((6, 4)), rng.standard_normal(4)

    def fn_idx(i):
        def fn(x):
            args = [q, K, V]
            args[i] = x
            out, _, cache = attention(*args, return_cache=True)
            return float(c @ out), attention_backward(cache, c)[i]
        return fn
    return max(input_grad_check(fn_idx(i), [q, K, V][i]) for i in range(3))


def input_grad_checks(seed: int = 0) -> dict:
    """Input-gradient checks for blocks whose outputs feed other blocks."""
    rng = np.random.default_rng(seed)
    cfg = SMALL
    out = {"attention": attention_input_check(seed)}
    p = ParamSet()
    init_gru(p, "gru", 5, 4, rng)
    h, c = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    x = rng.standard_normal((2, 5))

    def gx(xx):
        o, cache = gru_step(p, xx, h, "gru", return_cache=True)
        return float(np.sum(c * o)), gru_backward(p, cache, c, "gru", None)[0]

    def gh(hh):
        o, cache = gru_step(p, x, hh, "gru", return_cache=True)
        return float(np.sum(c * o)), gru_backward(p, cache, c, "gru", None)[1]
    out["gru_input"] = max(input_grad_check(gx, x), input_grad_check(gh, h))
    gp = ParamSet()
    kc.init_params(gp, cfg, rng)
    res, sig, cg = rng.standard_normal((2, cfg.latent_dim)), rng.uniform(0, 1, (2, 1)), rng.standard_normal((2, cfg.latent_dim))

    def gres(rr):
        k, cache = kc.gain_forward(gp, cfg, rr, sig)
        return float(np.sum(cg * k)), kc.gain_backward(gp, cfg, cache, cg, gp.zeros_like())[0]

    def gsig(ss):
        k, cache = kc.gain_forward(gp, cfg, res, ss)
        return float(np.sum(cg * k)), kc.gain_backward(gp, cfg, cache, cg, gp.zeros_like())[1]
    out["gain_input"] = max(input_grad_check(gres, res), input_grad_check(gsig, sig))
    return out


@_timed
def check_gradients(seed: int = 0, max_entries_per_param: int | None = None, tol: float = 1e-4) -> PropertyResult:
    worst, parts = 0.0, []
    for name, make in GRAD_BLOCKS.items():
        block, params, probe = make(seed)
        rep = grad_check(block, params, probe, name, h=1e-5, max_entries_per_param=max_entries_per_param, seed=seed)
        worst = max(worst, rep.max_rel_error)
        parts.append(f"{name}={rep.max_rel_error:.1e}")
    for name, v in input_grad_checks(seed).items():
        worst = max(worst, v)
        parts.append(f"{name}={v:.1e}")
    return PropertyResult("gradient_checks", worst < tol, worst, tol, ", ".join(parts))


# ---------------------------------------------------------------- suite

def run_suite(mutations=(), quick: bool = True) -> list[PropertyResult]:
    """Run every property; ``quick`` shrinks the memory sweep and samples large tensors."""
    for m in mutations:
        if m not in MUTATIONS:
            raise ValueError(f"unknown mutation {m!r}; expected one of {MUTATIONS}")
    return [
        check_kde_attention(mutate="attention-scale" in mutations),
        check_empty_memory(),
        check_fusion_identity(),
        check_gradients(max_entries_per_param=8 if quick else None),
        check_kalman_1d(),
        check_argmin_fusion(),
        check_contraction(),
        check_metric_invariants(),
        check_memory_policy(n=10_000 if quick else 100_000),
    ]

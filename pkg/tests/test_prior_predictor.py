import numpy as np

from neurokalman.config import ModelConfig
from neurokalman.nn_core import ParamSet, gru_step, mlp_forward
from neurokalman.prior_predictor import (h0_spec, init_params, init_prior, predict_prior,
                                         prior_mlp_spec)

CFG = ModelConfig(latent_dim=6, gru_hidden=5, prior_hidden=7, waypoint_embed=3)


def fresh(seed=0):
    params = ParamSet()
    init_params(params, CFG, np.random.default_rng(seed))
    return params


def test_init_prior_seeds_from_measurement(rng):
    params = fresh()
    r0 = rng.standard_normal(CFG.latent_dim)
    st = init_prior(params, CFG, r0)
    assert np.array_equal(st.z_tilde, r0) and st.z_tilde is not r0
    h0 = np.tanh(params["prior.h0.0.W"] @ r0 + params["prior.h0.0.b"])
    assert np.allclose(st.h, h0, atol=1e-15) and np.all(np.abs(st.h) < 1)


def test_predict_matches_manual_composition(rng):
    params = fresh(1)
    st = init_prior(params, CFG, rng.standard_normal(CFG.latent_dim))
    z_prev, w_prev = rng.standard_normal(CFG.latent_dim), rng.standard_normal(3)
    out = predict_prior(params, CFG, st, z_prev, w_prev)
    e = params["prior.embed.W"] @ w_prev + params["prior.embed.b"]
    h = gru_step(params, np.concatenate([z_prev, e]), st.h, "prior.gru")
    assert np.allclose(out.h, h, atol=1e-14)
    assert np.allclose(out.z_tilde, mlp_forward(params, h, prior_mlp_spec(CFG), "prior.mlp"), atol=1e-14)


def test_prior_ignores_encoder_parameters(rng):
    params = fresh(2)
    other = params.copy()
    other["enc.trunk.0.W"] = rng.standard_normal((4, 4))
    st = init_prior(params, CFG, np.ones(CFG.latent_dim))
    a = predict_prior(params, CFG, st, np.ones(CFG.latent_dim), np.zeros(3))
    b = predict_prior(other, CFG, st, np.ones(CFG.latent_dim), np.zeros(3))
    assert np.array_equal(a.z_tilde, b.z_tilde)


def test_contractive_parameters_reach_fixed_point():
    params = fresh(3)
    for k in params:
        if k.startswith("prior."):
            params[k] = params[k] * 0.1
    st = init_prior(params, CFG, np.full(CFG.latent_dim, 3.0))
    z, w = st.z_tilde, np.array([1.0, 0.0, 0.0])
    for _ in range(200):
        st = predict_prior(params, CFG, st, z, w)
        z_new = st.z_tilde
        step = np.max(np.abs(z_new - z))
        z = z_new
    assert step < 1e-10


def test_batched_equals_rowwise(rng):
    params = fresh(4)
    B = 5
    hs = rng.uniform(-1, 1, (B, CFG.gru_hidden))
    zs, ws = rng.standard_normal((B, CFG.latent_dim)), rng.standard_normal((B, 3))
    from neurokalman.prior_predictor import PriorState
    batch = predict_prior(params, CFG, PriorState(hs, zs), zs, ws)
    for b in range(B):
        row = predict_prior(params, CFG, PriorState(hs[b], zs[b]), zs[b], ws[b])
        assert np.allclose(batch.z_tilde[b], row.z_tilde, atol=1e-14)


def test_h0_spec_is_single_tanh_layer():
    assert h0_spec(CFG) == [(CFG.gru_hidden, "tanh")]


def zeroed():
    params = fresh()
    for k in params:
        params[k] = np.zeros_like(params[k])
    return params


def test_zero_parameters_give_zero_state():
    params = zeroed()
    st = init_prior(params, CFG, np.zeros(CFG.latent_dim))
    assert np.array_equal(st.h, np.zeros(CFG.gru_hidden))
    h_prev = np.linspace(-0.9, 0.9, CFG.gru_hidden)
    from neurokalman.prior_predictor import PriorState
    out = predict_prior(params, CFG, PriorState(h_prev, np.ones(CFG.latent_dim)), np.ones(CFG.latent_dim), np.ones(3))
    # zero GRU: update gate 0.5, candidate 0, so h = 0.5 h_prev; zero MLP maps it to 0
    assert np.allclose(out.h, 0.5 * h_prev, atol=1e-15)
    assert np.array_equal(out.z_tilde, np.zeros(CFG.latent_dim))


def test_h0_strictly_inside_unit_interval():
    params = fresh(5)
    r = np.random.default_rng(0)
    for _ in range(200):
        st = init_prior(params, CFG, r.standard_normal(CFG.latent_dim) * 3)
        assert np.all(np.abs(st.h) < 1.0)
    a = init_prior(params, CFG, np.ones(CFG.latent_dim))
    b = init_prior(params, CFG, np.ones(CFG.latent_dim))
    assert np.array_equal(a.h, b.h) and np.array_equal(a.z_tilde, b.z_tilde)


def test_contractive_hidden_steps_shrink():
    params = fresh(6)
    for k in params:
        if k.startswith("prior.gru.U"):
            params[k] = params[k] * 0.9 / np.linalg.norm(params[k], 2)
    from neurokalman.prior_predictor import PriorState
    z, w = np.full(CFG.latent_dim, 0.3), np.array([1.0, 0.0, 0.0])
    st = PriorState(np.full(CFG.gru_hidden, 0.9), z)
    prev, gaps = st.h, []
    for _ in range(60):
        st = predict_prior(params, CFG, st, z, w)
        gaps.append(np.linalg.norm(st.h - prev))
        prev = st.h
    assert all(b <= a + 1e-15 for a, b in zip(gaps[5:], gaps[6:])) and gaps[-1] < 1e-3

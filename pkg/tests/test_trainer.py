import numpy as np
import pytest

from neurokalman import sim_env as se
from neurokalman.config import EnvConfig, MemoryConfig, ModelConfig, RunConfig, TrainConfig
from neurokalman.model import NeuroKalman, WindowRecord, window_loss
from neurokalman.trainer import (TrainingDiverged, build_model, eval_worlds, train, train_worlds)

SHORT = EnvConfig(horizon=40)
TINY = ModelConfig(latent_dim=8, gru_hidden=8, prior_hidden=8, waypoint_embed=3, enc_hidden=16,
                   conf_hidden=4, head_hidden=8)


def model(cfg=TINY, env=SHORT):
    return NeuroKalman(cfg, env.feature_dim, env.goal_dim)


def test_zero_epochs_leaves_parameters_untouched():
    m = model()
    before = m.params.copy()
    rep = train(TrainConfig(epochs=0), m, se.make_worlds([0], "easy", SHORT), SHORT)
    assert rep.epochs == [] and rep.updates == 0 and m.params.bit_equal(before)


def test_empty_world_list_rejected():
    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1), model(), [], SHORT)


def test_overfits_one_world(calm_env):
    env = EnvConfig(**{**calm_env.__dict__, "horizon": 30})
    m = model(env=env)
    cfg = TrainConfig(lr=3e-3, epochs=200, teacher_forced_warmup_epochs=200, batch_episodes=1)
    rep = train(cfg, m, se.make_worlds([0], "easy", env), env)
    first, last = rep.epochs[0]["main_loss"], rep.epochs[-1]["main_loss"]
    assert last < 0.1 * first


def test_training_is_bit_identical(tmp_path):
    from neurokalman.nn_core import save_checkpoint
    worlds = se.make_worlds(range(3), "full", SHORT)
    cfg = TrainConfig(lr=1e-3, epochs=2, teacher_forced_warmup_epochs=1, batch_episodes=2, seed=4)
    blobs = []
    for i in range(2):
        m = model()
        train(cfg, m, worlds, SHORT)
        save_checkpoint(tmp_path / f"{i}.nkpt", m.params, m.meta())
        blobs.append((tmp_path / f"{i}.nkpt").read_bytes())
    assert blobs[0] == blobs[1]


def test_one_update_per_window():
    worlds = se.make_worlds([0], "easy", SHORT)
    cfg = TrainConfig(epochs=1, teacher_forced_warmup_epochs=1, batch_episodes=1, bptt_window=20)
    rep = train(cfg, model(), worlds, SHORT)
    assert rep.updates == 2  # 40 steps / window 20


def test_aux_coeff_zero_ignores_aux_heads(rng):
    m = model()
    F = SHORT.feature_dim
    steps = [(rng.standard_normal((1, 3)), rng.standard_normal(2 * F + SHORT.goal_dim + 3)[None],
              rng.standard_normal((1, 3)), np.ones(1)) for _ in range(4)]
    rec = WindowRecord(None, steps)
    loss, main, aux, _ = window_loss(m, rec, 0.0)
    assert loss == pytest.approx(main) and aux > 0
    loss2, _, _, _ = window_loss(m, rec, 0.2)
    assert loss2 == pytest.approx(main + 0.2 * aux)


def test_perfect_prediction_has_zero_loss(rng):
    m = model()
    F = SHORT.feature_dim
    enc_in = rng.standard_normal((1, 2 * F + SHORT.goal_dim + 3))
    out, _ = m.first_step(enc_in)
    loss, main, aux, grads = window_loss(m, WindowRecord(None, [(None, enc_in, out.w_post, np.ones(1))]), 0.2)
    assert loss == 0.0 and main == 0.0 and aux == 0.0


def test_masked_steps_contribute_nothing(rng):
    m = model()
    F = SHORT.feature_dim
    enc_in = rng.standard_normal((2, 2 * F + SHORT.goal_dim + 3))
    w = rng.standard_normal((2, 3))
    a = window_loss(m, WindowRecord(None, [(None, enc_in, w, np.array([1.0, 0.0]))]), 0.2)
    b = window_loss(m, WindowRecord(None, [(None, enc_in[:1], w[:1], np.ones(1))]), 0.2)
    assert a[0] == pytest.approx(b[0], abs=1e-14)
    assert a[3].allclose(b[3], atol=1e-14)


def test_divergence_is_reported():
    cfg = TrainConfig(epochs=3, teacher_forced_warmup_epochs=3, batch_episodes=1, divergence_loss=1e-9)
    with pytest.raises(TrainingDiverged) as exc:
        train(cfg, model(), se.make_worlds([0], "easy", SHORT), SHORT)
    assert len(exc.value.report.epochs) == 1


def test_world_splits_are_disjoint():
    cfg = RunConfig()
    cfg.train.n_train_worlds = 5
    cfg.eval.n_episodes = 5
    tr = {w.seed for w in train_worlds(cfg)}
    ev = {w.seed for w in eval_worlds(cfg)}
    assert not tr & ev
    assert all(w.difficulty == "easy" for w in eval_worlds(cfg, "easy"))


def test_build_model_dimensions():
    cfg = RunConfig()
    m = build_model(cfg)
    assert m.feature_dim == cfg.env.feature_dim and m.goal_dim == cfg.env.goal_dim


def test_cosine_schedule_endpoints():
    from neurokalman.trainer import epoch_lr
    cfg = TrainConfig(lr=1e-3, epochs=11, lr_final_ratio=0.05)
    assert epoch_lr(cfg, 0) == pytest.approx(1e-3)
    assert epoch_lr(cfg, 10) == pytest.approx(5e-5)
    assert epoch_lr(cfg, 5) == pytest.approx(0.5 * (1e-3 + 5e-5))
    lrs = [epoch_lr(cfg, e) for e in range(11)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert epoch_lr(TrainConfig(lr=2e-4, epochs=5), 3) == 2e-4


def test_aux_heads_isolated_when_coefficient_zero(rng):
    m = model()
    F = SHORT.feature_dim
    n_in = 2 * F + SHORT.goal_dim + 3
    steps = [(rng.standard_normal((2, 3)), rng.standard_normal((2, n_in)), rng.standard_normal((2, 3)), np.ones(2))
             for _ in range(3)]
    g0 = window_loss(m, WindowRecord(None, steps), 0.0)[3]
    # with aux_coeff 0 only the posterior head's error may matter: relabel and compare
    from neurokalman.model import step_l1
    calls = []
    orig = step_l1

    def spy(out, w, mask, aux, norm):
        res = orig(out, w, mask, aux, norm)
        calls.append(res)
        return res
    import neurokalman.model as mm
    mm.step_l1 = spy
    try:
        window_loss(m, WindowRecord(None, steps), 0.0)
    finally:
        mm.step_l1 = orig
    assert all(not c[3].any() and not c[4].any() for c in calls)
    assert any(v.any() for v in g0.values())

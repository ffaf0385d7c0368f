import numpy as np
import pytest
from hypothesis import given, strategies as st

from neurokalman import drift_lab as dl
from neurokalman import sim_env as se
from neurokalman.config import ModelConfig, RunConfig
from neurokalman.model import NeuroKalman


def test_contraction_reaches_fixed_point():
    tr = dl.contraction_check(1.1, 0.5, 0.1, 1.0, 100)
    assert tr.fixed_point == pytest.approx(0.5 * 0.1 / (1 - 0.55))
    assert abs(tr.epsilon[-1] - 0.1111) < 1e-4 and not tr.diverged
    assert np.allclose(tr.epsilon, tr.bound, rtol=1e-12, atol=1e-15)


@given(st.floats(0.5, 3), st.floats(0, 1), st.floats(0, 2), st.floats(0, 5))
def test_closed_form_matches_iteration(lam, K, xi, eps0):
    tr = dl.contraction_check(lam, K, xi, eps0, 30)
    scale = max(1.0, max(abs(v) for v in tr.epsilon))
    assert np.max(np.abs(np.subtract(tr.epsilon, tr.bound))) <= 1e-9 * scale
    assert tr.diverged == ((1 - K) * lam >= 1)


def test_zero_gain_recovers_lambda():
    tr = dl.contraction_check(1.1, 0.0, 0.1, 1.0, 100)
    assert tr.diverged and tr.fixed_point is None
    assert abs(dl.fit_growth(tr.epsilon) - 1.1) < 1e-6


def test_unit_ratio_has_linear_bound():
    tr = dl.contraction_check(2.0, 0.5, 0.2, 1.0, 10)
    assert tr.diverged and tr.fixed_point is None
    assert tr.bound[10] == pytest.approx(1.0 + 10 * 0.5 * 0.2)


def test_invalid_parameters():
    for args in [(0.0, 0.5, 0.1, 1.0), (1.1, 1.5, 0.1, 1.0), (1.1, 0.5, -0.1, 1.0)]:
        with pytest.raises(ValueError):
            dl.contraction_check(*args, 10)


def test_planted_system_fit():
    base, full, meas = dl.planted_system(1.05, steps=200, gain=0.5, xi=0.5, seed=0)
    assert abs(dl.fit_growth(base) - 1.05) < 1e-3
    tr = dl.contraction_from_errors(base, full, np.full_like(meas, meas.max()), 0.5)
    assert tr.satisfaction == 1.0 and not tr.diverged


def test_non_growing_baseline_not_applicable():
    tr = dl.contraction_from_errors(np.linspace(5, 1, 50), np.ones(50), np.ones(50), 0.5)
    assert tr.satisfaction is None and "not applicable" in tr.note


def test_fit_growth_needs_data():
    with pytest.raises(ValueError):
        dl.fit_growth([1.0])


def test_curve_counts_running_episodes():
    c = dl.curve_from_errors([np.array([1.0, 2.0, 3.0]), np.array([3.0])], 5)
    assert c.steps == [0, 1, 2] and c.mean_error == [2.0, 2.0, 3.0] and c.n_alive == [2, 1, 1]
    assert c.at(1) == 2.0
    with pytest.raises(ValueError):
        dl.DriftCurve([0], [1.0, 2.0], [1])


def test_drift_curve_starts_at_zero():
    cfg = RunConfig()
    m = NeuroKalman(ModelConfig(), cfg.env.feature_dim, cfg.env.goal_dim)
    c = dl.drift_curve(m, se.make_worlds(range(3), "easy", cfg.env), horizon=20, env=cfg.env)
    assert c.steps[0] == 0 and c.mean_error[0] == pytest.approx(0.0, abs=1e-9)
    assert c.n_alive[0] == 3 and len(c.steps) <= 21


def test_ablation_table():
    t = dl.AblationTable("gain", [{"variant": "a", "seed": s, "ne": s, "sr": 1.0, "osr": 1.0, "spl": 0.5}
                                  for s in (1.0, 3.0)])
    assert t.mean("a", "ne") == 2.0 and t.summary()[0]["ne_std"] == 1.0
    assert "| a | 2.00 ± 1.00 |" in t.render()


def test_variant_config_sets_seeds():
    cfg = dl.variant_config(RunConfig(), dict(dl.ABLATIONS["gain"])["fixed_0.1"], 7)
    assert cfg.train.seed == 7 and cfg.model.init_seed == 7
    assert cfg.model.gain_mode == "fixed" and cfg.model.fixed_gain == 0.1


def test_unknown_ablation():
    with pytest.raises(ValueError):
        dl.run_ablation("width", RunConfig())


def test_svg_has_one_polyline_per_series(tmp_path):
    dl.svg_line_plot({"x<y": ([0, 1, 2], [0.0, 1.0, float("nan")]), "b": ([0, 1], [2.0, 1.0])},
                     tmp_path / "p.svg", title="t")
    text = (tmp_path / "p.svg").read_text()
    assert text.count("<polyline") == 2 and "x&lt;y" in text and text.startswith("<svg")


def test_contraction_csv(tmp_path):
    dl.write_contraction_csv(dl.contraction_check(1.1, 0.5, 0.1, 1.0, 5), tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == 7 and lines[0].startswith("step,epsilon,bound")


def test_unit_gain_tracks_measurement_error():
    tr = dl.contraction_check(1.3, 1.0, 0.25, 4.0, 20)
    assert tr.epsilon[0] == 4.0 and all(e == 0.25 for e in tr.epsilon[1:])


def test_noiseless_measurement_drives_error_to_zero():
    tr = dl.contraction_check(1.1, 0.99, 0.0, 5.0, 50)
    assert tr.epsilon[-1] < 1e-50 and tr.fixed_point == 0.0


def test_fixed_point_matches_closed_form():
    for lam, K, xi in [(1.1, 0.5, 0.1), (0.8, 0.2, 1.0), (1.9, 0.6, 0.3)]:
        tr = dl.contraction_check(lam, K, xi, 1.0, 400)
        assert abs(tr.epsilon[-1] - xi * K / (1 - (1 - K) * lam)) < 1e-9


def test_expert_following_error_within_max_step(calm_env):
    worlds = se.make_worlds(range(10), "full", calm_env)
    m = NeuroKalman(ModelConfig(), calm_env.feature_dim, calm_env.goal_dim)
    eps = se.rollout_many(m, worlds, "teacher_forced", calm_env)
    c = dl.curve_from_errors(dl.episode_errors(eps), calm_env.horizon)
    assert max(c.mean_error) <= calm_env.max_step
    assert all(a >= b for a, b in zip(c.n_alive, c.n_alive[1:]))


@pytest.mark.slow
def test_trained_model_drift_and_bound(default_cfg, trained_default):
    """Dead reckoning grows window over window; the trained model stays under the recursion bound."""
    from neurokalman.trainer import eval_worlds
    cfg = default_cfg
    worlds = eval_worlds(cfg, "hard", cfg.lab.n_seeds)
    base = dl.drift_curve(trained_default.model, worlds, 150, cfg.env, cfg.memory, cfg.eval.seed_offset,
                          gain_override=0.0)
    windows = [np.mean(base.mean_error[i:i + 50]) for i in (0, 50, 100)]
    assert windows[0] < windows[1] < windows[2]
    tr = dl.empirical_contraction(trained_default.model, worlds, cfg.env, cfg.memory, cfg.eval.seed_offset, 150)
    assert tr.lambda_est > 1.0 and tr.satisfaction >= 0.95

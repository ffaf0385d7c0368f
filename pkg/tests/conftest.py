import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from neurokalman.config import EnvConfig, ModelConfig, load_config

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return ModelConfig(latent_dim=6, gru_hidden=5, prior_hidden=5, waypoint_embed=3, enc_hidden=7,
                       conf_hidden=4, head_hidden=5)


@pytest.fixture(scope="session")
def default_cfg():
    return load_config(Path(__file__).resolve().parents[1] / "configs" / "default.ini")


@pytest.fixture(scope="session")
def model_cache():
    """Trained models keyed by config hash, shared by every test in the session."""
    return {}


@pytest.fixture(scope="session")
def trained_default(default_cfg, model_cache):
    """The learnable-gain model trained on configs/default.ini with seed 0."""
    from neurokalman import drift_lab as dl
    vcfg = dl.variant_config(default_cfg, dict(dl.ABLATIONS["gain"])["learnable"], 0)
    return dl.trained_variant(vcfg, model_cache)


@pytest.fixture
def calm_env():
    """No wind, no actuation noise, no fog: the expert can follow the route exactly."""
    return EnvConfig(wind_min=0.0, wind_max=0.0, act_noise=0.0, fog_enter=0.0)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)

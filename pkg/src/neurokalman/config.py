"""Dataclass configs and the INI run-config loader.

A run config is one INI file with sections ``[model] [env] [memory] [train]
[eval] [lab] [run]``. Unknown sections or keys are rejected, and every numeric
field is range-checked when loaded.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    latent_dim: int = 32
    gru_hidden: int = 32
    prior_hidden: int = 32
    waypoint_embed: int = 8
    enc_hidden: int = 64
    conf_hidden: int = 16
    head_hidden: int = 32
    # "learnable" | "fixed" | "zero"; zero is the dead-reckoning baseline
    gain_mode: str = "learnable"
    fixed_gain: float = 0.5
    init_seed: int = 0


@dataclass
class EnvConfig:
    arena_half_width: float = 150.0
    alt_min: float = 10.0
    alt_max: float = 110.0
    n_landmarks: int = 24
    landmark_radius: float = 8.0
    rbf_length: float = 100.0
    scene_seed: int = 0
    max_step: float = 2.0
    horizon: int = 300
    lookahead: int = 10
    arrive_radius: float = 1.0
    success_radius: float = 20.0
    stop_eps: float = 0.1
    wind_min: float = 0.3
    wind_max: float = 0.5
    act_noise: float = 0.2
    pos_noise: float = 6.0
    fog_pos_noise: float = 30.0
    feat_noise: float = 0.05
    fog_visibility: float = 0.15
    fog_enter: float = 0.02
    fog_exit: float = 0.1
    pos_scale: float = 100.0

    @property
    def feature_dim(self) -> int:
        return self.n_landmarks + 1

    @property
    def goal_dim(self) -> int:
        return 4


@dataclass
class MemoryConfig:
    capacity: int = 10
    threshold: float = 0.5


@dataclass
class TrainConfig:
    lr: float = 5e-5
    # cosine decay to lr * lr_final_ratio by the last epoch; 1.0 keeps lr constant
    lr_final_ratio: float = 1.0
    batch_episodes: int = 16
    aux_coeff: float = 0.2
    epochs: int = 0
    teacher_forced_warmup_epochs: int = 0
    seed: int = 0
    bptt_window: int = 20
    n_train_worlds: int = 64
    n_val_worlds: int = 16
    eval_every: int = 0
    subset_fraction: float = 1.0
    divergence_loss: float = 1e6
    grad_clip: float = 0.0


@dataclass
class EvalConfig:
    n_episodes: int = 100
    seed_offset: int = 100_000


@dataclass
class LabConfig:
    n_seeds: int = 50
    replicates: int = 3
    lambda_gru: float = 1.1
    gain: float = 0.5
    xi: float = 0.1
    eps0: float = 1.0
    steps: int = 100
    planted_lambda: float = 1.05


@dataclass
class RunMeta:
    seed: int = 0
    out: str = "runs/default"


# inclusive (min, max) per numeric field; None = unbounded on that side
_RANGES = {
    "model": {
        "latent_dim": (1, 1024), "gru_hidden": (1, 1024), "prior_hidden": (1, 1024),
        "waypoint_embed": (1, 256), "enc_hidden": (1, 1024), "conf_hidden": (1, 256),
        "head_hidden": (1, 1024), "fixed_gain": (0.0, 1.0), "init_seed": (0, None),
    },
    "env": {
        "arena_half_width": (50.0, 5000.0), "alt_min": (0.0, None), "alt_max": (0.0, None),
        "n_landmarks": (1, 256), "landmark_radius": (0.0, 100.0), "rbf_length": (1.0, None),
        "scene_seed": (0, None), "max_step": (0.1, 50.0), "horizon": (0, 100_000),
        "lookahead": (1, 100), "arrive_radius": (0.0, None), "success_radius": (0.0, None),
        "stop_eps": (0.0, 1.0), "wind_min": (0.0, None), "wind_max": (0.0, None),
        "act_noise": (0.0, None), "pos_noise": (0.0, None), "fog_pos_noise": (0.0, None),
        "feat_noise": (0.0, None), "fog_visibility": (0.0, 1.0), "fog_enter": (0.0, 1.0),
        "fog_exit": (0.0, 1.0), "pos_scale": (1.0, None),
    },
    "memory": {"capacity": (1, 10_000), "threshold": (0.0, 1.0)},
    "train": {
        "lr": (1e-12, 1.0), "lr_final_ratio": (0.0, 1.0), "batch_episodes": (1, 10_000), "aux_coeff": (0.0, None),
        "epochs": (0, 1_000_000), "teacher_forced_warmup_epochs": (0, 1_000_000),
        "seed": (0, None), "bptt_window": (1, 100_000), "n_train_worlds": (1, 1_000_000),
        "n_val_worlds": (0, 1_000_000), "eval_every": (0, None), "subset_fraction": (1e-6, 1.0),
        "divergence_loss": (0.0, None), "grad_clip": (0.0, None),
    },
    "eval": {"n_episodes": (1, 1_000_000), "seed_offset": (0, None)},
    "lab": {
        "n_seeds": (1, 1_000_000), "replicates": (1, 1000), "lambda_gru": (0.0, None),
        "gain": (0.0, 1.0), "xi": (0.0, None), "eps0": (0.0, None), "steps": (1, 1_000_000),
        "planted_lambda": (0.0, None),
    },
    "run": {"seed": (0, None)},
}

_CHOICES = {("model", "gain_mode"): ("learnable", "fixed", "zero")}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    lab: LabConfig = field(default_factory=LabConfig)
    run: RunMeta = field(default_factory=RunMeta)

    def to_dict(self) -> dict:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in fields(self)}

    def config_hash(self) -> str:
        """Hash of everything that affects results; the output directory does not."""
        d = self.to_dict()
        d["run"].pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with ``section={key: value}`` overrides applied."""
        out = RunConfig(**{f.name: dataclasses.replace(getattr(self, f.name)) for f in fields(self)})
        for sec, kv in sections.items():
            obj = getattr(out, sec)
            for k, v in kv.items():
                if not hasattr(obj, k):
                    raise ConfigError(f"[{sec}] has no key {k!r}")
                setattr(obj, k, v)
        validate(out)
        return out


def _line_of(text_lines, section, key):
    cur = None
    for i, line in enumerate(text_lines, 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
        elif cur == section and s.split("=", 1)[0].strip().lower() == key:
            return i
    return None


def _coerce(raw: str, proto, where: str):
    if isinstance(proto, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(proto, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if isinstance(proto, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw.strip()


def validate(cfg: RunConfig) -> None:
    for sec, ranges in _RANGES.items():
        obj = getattr(cfg, sec)
        for key, (lo, hi) in ranges.items():
            v = getattr(obj, key)
            if v != v or (lo is not None and v < lo) or (hi is not None and v > hi):
                raise ConfigError(f"[{sec}] {key} = {v} outside allowed range [{lo}, {hi}]")
    for (sec, key), choices in _CHOICES.items():
        v = getattr(getattr(cfg, sec), key)
        if v not in choices:
            raise ConfigError(f"[{sec}] {key} = {v!r}; expected one of {choices}")
    if cfg.model.gain_mode == "fixed" and not 0.0 < cfg.model.fixed_gain < 1.0:
        raise ConfigError(f"[model] fixed_gain must lie in (0, 1), got {cfg.model.fixed_gain}")
    if cfg.env.alt_max <= cfg.env.alt_min:
        raise ConfigError("[env] alt_max must exceed alt_min")
    if cfg.env.wind_max < cfg.env.wind_min:
        raise ConfigError("[env] wind_max must be >= wind_min")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = RunConfig()
    lines = text.splitlines()
    for sec in parser.sections():
        if not hasattr(cfg, sec) or sec not in _RANGES:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        obj = getattr(cfg, sec)
        known = {f.name: f for f in fields(obj) if f.init}
        for key, raw in parser.items(sec):
            line = _line_of(lines, sec, key)
            where = f"{path}:{line} [{sec}] {key}"
            if key not in known:
                raise ConfigError(f"{where}: unknown key")
            setattr(obj, key, _coerce(raw, getattr(obj, key), where))
    try:
        validate(cfg)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    out = []
    for name, section in cfg.to_dict().items():
        out.append(f"[{name}]")
        obj = getattr(cfg, name)
        for f in fields(obj):
            if f.init:
                out.append(f"{f.name} = {section[f.name]}")
        out.append("")
    return "\n".join(out)

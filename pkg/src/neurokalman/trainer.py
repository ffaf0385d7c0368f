"""End-to-end training on expert waypoint supervision.

Loss per step: L1(head(z_t), w*) + aux_coeff * [L1(head(z~_t), w*) + L1(head(r_t), w*)].
Episodes are rolled out in batches; gradients are truncated every
``bptt_window`` steps and each window ends with one Adam update. Warmup
epochs execute the expert's waypoints, later epochs execute the model's own.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import EnvConfig, MemoryConfig, RunConfig, TrainConfig
from .errors import NumericalError
from .memory_bank import MemoryBank
from .model import NeuroKalman, WindowRecord, step_l1, window_loss
from .nn_core import AdamState, ParamSet, adam_step
from .sim_env import (EnvBatch, World, build_encoder_inputs, clip_norm, compute_metrics,
                      make_worlds, rollout_many)

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["epoch", "main_loss", "aux_loss", "ne", "sr", "osr", "spl"]


class TrainingDiverged(NumericalError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    updates: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CURVE_COLUMNS)
            for row in self.epochs:
                w.writerow([row["epoch"]] + [_fmt(row[c]) for c in CURVE_COLUMNS[1:]])


def _fmt(v):
    return "" if v is None else f"{v:.10g}"


def step_loss(model: NeuroKalman, record: WindowRecord, aux_coeff: float = 0.2, gain_override=None):
    """Loss and gradients of one recorded window (see ``model.window_loss``)."""
    loss, main, aux, grads = window_loss(model, record, aux_coeff, gain_override)
    if not np.isfinite(loss):
        raise NumericalError("non-finite training loss")
    return loss, grads


def _clip_grads(grads: ParamSet, max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Cosine decay from ``lr`` to ``lr * lr_final_ratio`` over the run; ratio 1 is constant."""
    r = cfg.lr_final_ratio
    if r == 1.0 or cfg.epochs <= 1:
        return cfg.lr
    c = 0.5 * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1)))
    return cfg.lr * (r + (1.0 - r) * c)


def train_batch(model: NeuroKalman, adam: AdamState, worlds: list[World], cfg: TrainConfig,
                env: EnvConfig, memory: MemoryConfig, mode: str, noise_seed: int, lr: float | None = None):
    """Roll out one batch with truncated BPTT; returns (main_sum, aux_sum, n_samples, updates)."""
    eb = EnvBatch(worlds, env, noise_seed)
    banks = [MemoryBank(memory.capacity, memory.threshold) for _ in range(eb.B)]
    caches, raw = [], []
    z = h = w_prev = None
    main_tot = aux_tot = 0.0
    n_tot = 0.0
    updates = 0

    def flush():
        nonlocal updates
        norm = max(sum(float(m.sum()) for _, _, m in raw), 1.0)
        grads = model.params.zeros_like()
        dz = dh = 0.0
        for cache, (out, w_star, m) in zip(reversed(caches), reversed(raw)):
            _, _, dwp, dwt, dwm = step_l1(out, w_star, m, cfg.aux_coeff, norm)
            dz, dh = model.backward_step(cache, dwp, dwt, dwm, dz, dh, grads)
        if cfg.grad_clip > 0:
            _clip_grads(grads, cfg.grad_clip)
        adam_step(model.params, grads, adam, cfg.lr if lr is None else lr)
        updates += 1
        caches.clear()
        raw.clear()

    for t in range(eb.horizon):
        if not eb.alive.any():
            break
        pos_obs, feats, _ = eb.observe()
        enc_in = build_encoder_inputs(feats, pos_obs, eb.goals, banks, env)
        w_star = eb.expert() / env.max_step
        if t == 0:
            out, cache = model.first_step(enc_in)
        else:
            out, cache = model.next_step(z, h, w_prev, enc_in)
        mask = eb.alive.astype(np.float64)
        if not np.all(np.isfinite(out.z[eb.alive])):
            raise NumericalError(f"non-finite latent at step {t}")
        main, aux, *_ = step_l1(out, w_star, mask, cfg.aux_coeff, 1.0)
        main_tot += main
        aux_tot += aux
        n_tot += mask.sum()
        caches.append(cache)
        raw.append((out, w_star, mask))
        if mode == "closed_loop":
            w_exec = clip_norm(out.w_post * env.max_step, env.max_step)
            stop = np.linalg.norm(w_exec, axis=1) < env.stop_eps * env.max_step
        else:
            w_exec = w_star * env.max_step
            stop = np.linalg.norm(w_exec, axis=1) == 0.0
        alive = eb.alive.copy()
        eb.move(w_exec, stop)
        for b in np.flatnonzero(alive):
            banks[b].try_store(feats[b], t, float(out.sigma[b]))
        z, h, w_prev = out.z, out.h, w_exec / env.max_step
        if len(caches) == cfg.bptt_window:
            flush()
    if caches:
        flush()
    return main_tot, aux_tot, n_tot, updates


def train(cfg: TrainConfig, model: NeuroKalman, worlds: list[World], env: EnvConfig | None = None,
          memory: MemoryConfig | None = None, val_worlds: list[World] | None = None,
          progress=None) -> TrainReport:
    env = env or EnvConfig()
    memory = memory or MemoryConfig()
    if not worlds:
        raise ValueError("training needs at least one world")
    rng = np.random.default_rng([cfg.seed, 2718])
    if cfg.subset_fraction < 1.0:
        k = max(1, int(round(cfg.subset_fraction * len(worlds))))
        keep = np.sort(rng.choice(len(worlds), size=k, replace=False))
        worlds = [worlds[i] for i in keep]
    adam = AdamState.for_params(model.params)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        mode = "teacher_forced" if epoch < cfg.teacher_forced_warmup_epochs else "closed_loop"
        order = rng.permutation(len(worlds))
        lr = epoch_lr(cfg, epoch)
        main = aux = n = 0.0
        for bi, i in enumerate(range(0, len(order), cfg.batch_episodes)):
            batch = [worlds[j] for j in order[i:i + cfg.batch_episodes]]
            noise_seed = int(np.random.SeedSequence([cfg.seed, epoch, bi]).generate_state(1)[0])
            m, a, c, u = train_batch(model, adam, batch, cfg, env, memory, mode, noise_seed, lr)
            main, aux, n = main + m, aux + a, n + c
            report.updates += u
        row = {"epoch": epoch, "main_loss": main / max(n, 1.0), "aux_loss": aux / max(n, 1.0),
               "ne": None, "sr": None, "osr": None, "spl": None, "mode": mode}
        if row["main_loss"] + cfg.aux_coeff * row["aux_loss"] > cfg.divergence_loss:
            report.epochs.append(row)
            raise TrainingDiverged(f"loss diverged at epoch {epoch}", report)
        if val_worlds and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            rep = evaluate(model, val_worlds, env, memory, noise_seed=cfg.seed + 1)
            row.update(ne=rep.ne, sr=rep.sr, osr=rep.osr, spl=rep.spl)
        row["seconds"] = time.perf_counter() - t0
        report.epochs.append(row)
        log.info("epoch %d %s main %.4f aux %.4f", epoch, mode, row["main_loss"], row["aux_loss"])
        if progress is not None:
            progress(row)
    return report


# world seed bases; eval worlds use EvalConfig.seed_offset
TRAIN_SEED_BASE = 0
VAL_SEED_BASE = 50_000


def train_worlds(cfg: RunConfig) -> list[World]:
    n = cfg.train.n_train_worlds
    return make_worlds(range(TRAIN_SEED_BASE, TRAIN_SEED_BASE + n), "full", cfg.env)


def val_worlds(cfg: RunConfig) -> list[World]:
    n = cfg.train.n_val_worlds
    return make_worlds(range(VAL_SEED_BASE, VAL_SEED_BASE + n), "full", cfg.env)


def eval_worlds(cfg: RunConfig, split: str = "full", n: int | None = None) -> list[World]:
    n = cfg.eval.n_episodes if n is None else n
    off = cfg.eval.seed_offset
    return make_worlds(range(off, off + n), split, cfg.env)


def build_model(cfg: RunConfig, params: ParamSet | None = None) -> NeuroKalman:
    return NeuroKalman(cfg.model, cfg.env.feature_dim, cfg.env.goal_dim, params)


def train_from_config(cfg: RunConfig, progress=None):
    """Build the model and worlds described by ``cfg`` and train; returns (model, report)."""
    model = build_model(cfg)
    vw = val_worlds(cfg) if cfg.train.eval_every else None
    report = train(cfg.train, model, train_worlds(cfg), cfg.env, cfg.memory, vw, progress)
    return model, report


def evaluate(model: NeuroKalman, worlds: list[World], env: EnvConfig, memory: MemoryConfig,
             noise_seed: int = 0, gain_override=None):
    eps = rollout_many(model, worlds, "closed_loop", env, memory, noise_seed, gain_override,
                       keep_observations=False)
    return compute_metrics(eps, env.success_radius)

"""Synthetic continuous 3D navigation environment.

Each world is a start/target pair with a straight, collision-free route and a
set of spherical landmarks. The landmark layout is fixed per scene in the
route-aligned body frame (origin at the start, x toward the target, z up), so
landmark responses mean the same thing in every world. The agent is pushed by
a per-episode wind (the systematic error that makes blind integration drift)
plus actuation noise. Observations are a noisy body-frame position fix and
landmark RBF responses, both degraded while the episode is in a fog segment
(a two-state Markov chain). Waypoints given to and produced by the model are
body-frame displacements.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .config import EnvConfig, MemoryConfig
from .errors import ConfigError
from .kde_retrieval import retrieve
from .measurement_encoder import Observation, encoder_input
from .memory_bank import MemoryBank

DIFFICULTY_RANGES = {"easy": (50.0, 250.0), "hard": (250.0, 400.0)}
_CLEARANCE = 3.0
_MAX_TRIES = 200
# along-route extent of the arena in the body frame (metres)
ARENA_X = (-100.0, 500.0)


@dataclass(frozen=True)
class World:
    landmarks: np.ndarray
    target: np.ndarray
    start: np.ndarray
    path: np.ndarray
    seed: int
    difficulty: str

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.target - self.start))

    @property
    def rotation(self) -> np.ndarray:
        return heading_rotation(self.start, self.target)


@dataclass
class Episode:
    world: World
    agent_positions: np.ndarray
    executed_waypoints: np.ndarray
    observations: list
    horizon: int
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean_gain: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stored: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    status: str = "horizon"

    @property
    def failed(self) -> bool:
        return self.status in ("collision", "nan", "out_of_arena")


@dataclass
class MetricReport:
    ne: float
    sr: float
    osr: float
    spl: float
    rows: list[dict]


# ---------------------------------------------------------------- worlds

@lru_cache(maxsize=32)
def _layout(scene_seed: int, n: int, half_width: float, alt_span: float):
    """Landmark layout in the route frame (x along the route, z up), fixed per scene."""
    rng = np.random.default_rng([scene_seed, 7919])
    x = rng.uniform(ARENA_X[0] + 50.0, ARENA_X[1] - 50.0, size=n)
    y = rng.uniform(-half_width, half_width, size=n)
    z = rng.uniform(-alt_span / 2, alt_span / 2, size=n)
    lm = np.stack([x, y, z], axis=1)
    lm.setflags(write=False)
    return lm


def scene_layout(env: EnvConfig) -> np.ndarray:
    return _layout(env.scene_seed, env.n_landmarks, env.arena_half_width, env.alt_max - env.alt_min)


def heading_rotation(start, target) -> np.ndarray:
    """Rows are the body axes in world coordinates: x toward the target (horizontal), z up."""
    d = np.asarray(target, dtype=np.float64) - start
    hx = np.array([d[0], d[1], 0.0])
    hx /= np.linalg.norm(hx)
    hz = np.array([0.0, 0.0, 1.0])
    return np.stack([hx, np.cross(hz, hx), hz])


def straight_path(start, target, max_step: float) -> np.ndarray:
    dist = float(np.linalg.norm(target - start))
    n = max(1, math.ceil(dist / max_step))
    s = np.linspace(0.0, 1.0, n + 1)[:, None]
    return start + s * (target - start)


def _path_clear(path, landmarks, radius) -> bool:
    d = np.linalg.norm(path[:, None, :] - landmarks[None, :, :], axis=-1)
    return bool(d.min() > radius + _CLEARANCE)


def generate_world(seed: int, difficulty: str = "easy", env: EnvConfig | None = None) -> World:
    """Deterministic world for ``seed``; ``difficulty`` is easy, hard or full (either)."""
    env = env or EnvConfig()
    layout = scene_layout(env)
    W = 1000.0
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt, 104729])
        diff = difficulty
        if diff == "full":
            diff = "easy" if rng.random() < 0.5 else "hard"
        if diff not in DIFFICULTY_RANGES:
            raise ConfigError(f"unknown difficulty {difficulty!r}")
        lo, hi = DIFFICULTY_RANGES[diff]
        mid_alt = 0.5 * (env.alt_min + env.alt_max)
        half_alt = 0.5 * (env.alt_max - env.alt_min)
        for _ in range(_MAX_TRIES):
            dist = rng.uniform(lo, hi)
            start = np.array([*rng.uniform(-W, W, 2), mid_alt + rng.uniform(-0.4, 0.4) * half_alt])
            ang = rng.uniform(0.0, 2 * np.pi)
            dz = rng.uniform(-0.1, 0.1) * dist
            if abs(start[2] + dz - mid_alt) > 0.8 * half_alt:
                continue
            horiz = math.sqrt(dist * dist - dz * dz)
            target = start + np.array([horiz * math.cos(ang), horiz * math.sin(ang), dz])
            R = heading_rotation(start, target)
            landmarks = start + layout @ R
            path = straight_path(start, target, env.max_step)
            if _path_clear(path, landmarks, env.landmark_radius):
                return World(landmarks=landmarks, target=target, start=start, path=path,
                             seed=int(seed), difficulty=diff)
    raise RuntimeError(f"could not generate a valid world for seed {seed}")


def make_worlds(seeds, difficulty: str, env: EnvConfig) -> list[World]:
    return [generate_world(int(s), difficulty, env) for s in seeds]


def to_body(world: World, vec):
    """Rotate a world-frame displacement into the episode's body frame."""
    return np.asarray(vec) @ world.rotation.T


def goal_embedding(world: World, env: EnvConfig) -> np.ndarray:
    tb = to_body(world, world.target - world.start)
    return np.concatenate([tb / env.pos_scale, [world.distance / env.pos_scale]])


def landmark_response(landmarks, position, length: float):
    diff = np.asarray(position)[..., None, :] - landmarks
    return np.exp(-0.5 * np.sum(diff * diff, axis=-1) / (length * length))


def observe(world: World, position, noise_rng, env: EnvConfig | None = None, fog: bool = False) -> Observation:
    """Noisy observation at world ``position``.

    The position fix is body-frame (relative to the start); the feature is
    the visibility-scaled landmark response vector plus the visibility level.
    """
    env = env or EnvConfig()
    position = np.asarray(position, dtype=np.float64)
    vis = env.fog_visibility if fog else 1.0
    pos_std = env.fog_pos_noise if fog else env.pos_noise
    clean = np.append(vis * landmark_response(world.landmarks, position, env.rbf_length), vis)
    feat = clean + env.feat_noise * noise_rng.standard_normal(clean.shape)
    pos = to_body(world, position - world.start) + pos_std * noise_rng.standard_normal(3)
    return Observation(position=pos, local_feature=feat, goal_embed=goal_embedding(world, env))


# ---------------------------------------------------------------- expert

def clip_norm(v, max_norm: float):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.where(n > max_norm, max_norm / np.maximum(n, 1e-300), 1.0)
    return v * scale


def expert_waypoint(world: World, position, env: EnvConfig | None = None) -> np.ndarray:
    """World-frame expert displacement at world ``position`` (``EnvBatch.expert`` rotates it)."""
    env = env or EnvConfig()
    lens = np.array([len(world.path)])
    return _expert(world.path[None], lens, world.target[None], np.asarray(position, dtype=np.float64)[None], env)[0]


def _expert(paths, lens, targets, positions, env: EnvConfig):
    """Batched expert: head for the path point ``lookahead`` past the nearest one."""
    d = np.linalg.norm(paths - positions[:, None, :], axis=-1)
    idx = np.argmin(d, axis=1)
    look = np.minimum(idx + env.lookahead, lens - 1)
    aim = paths[np.arange(len(paths)), look]
    w = clip_norm(aim - positions, env.max_step)
    arrived = np.linalg.norm(targets - positions, axis=-1) <= env.arrive_radius
    w[arrived] = 0.0
    return w


def path_distance(path, position):
    """Distance from ``position`` to the polyline ``path`` and the nearest point on it."""
    a = path[:-1]
    ab = path[1:] - a
    if len(ab) == 0:
        return float(np.linalg.norm(position - path[0])), path[0]
    t = np.einsum("ij,ij->i", position - a, ab) / np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
    proj = a + np.clip(t, 0.0, 1.0)[:, None] * ab
    dist = np.linalg.norm(proj - position, axis=1)
    i = int(np.argmin(dist))
    return float(dist[i]), proj[i]


# ---------------------------------------------------------------- batched episodes

class EnvBatch:
    """Vectorised state of B concurrent episodes with pre-drawn noise streams.

    Each episode's noise comes from its own generator seeded by
    (noise_seed, world seed), so results do not depend on batch composition.
    """

    def __init__(self, worlds: list[World], env: EnvConfig, noise_seed: int, horizon: int | None = None):
        self.worlds = worlds
        self.env = env
        self.B = B = len(worlds)
        self.horizon = env.horizon if horizon is None else horizon
        T = self.horizon + 1
        F = env.feature_dim
        Lmax = max(len(w.path) for w in worlds)
        self.paths = np.stack([np.vstack([w.path, np.repeat(w.path[-1:], Lmax - len(w.path), 0)]) for w in worlds])
        self.lens = np.array([len(w.path) for w in worlds])
        self.targets = np.stack([w.target for w in worlds])
        self.goals = np.stack([goal_embedding(w, env) for w in worlds])
        self.landmarks = np.stack([w.landmarks for w in worlds])
        self.rot = np.stack([w.rotation for w in worlds])
        self.starts = np.stack([w.start for w in worlds])
        self.pos_noise = np.empty((B, T, 3))
        self.feat_noise = np.empty((B, T, F))
        self.act_noise = np.empty((B, T, 3))
        self.fog_u = np.empty((B, T))
        self.wind = np.zeros((B, 3))
        for b, w in enumerate(worlds):
            rng = np.random.default_rng([noise_seed, w.seed, 15485863])
            mag = rng.uniform(env.wind_min, env.wind_max)
            ang = rng.uniform(0, 2 * np.pi)
            self.wind[b, :2] = mag * np.array([math.cos(ang), math.sin(ang)])
            self.pos_noise[b] = rng.standard_normal((T, 3))
            self.feat_noise[b] = rng.standard_normal((T, F))
            self.act_noise[b] = rng.standard_normal((T, 3))
            self.fog_u[b] = rng.random(T)
        self.pos = np.stack([w.start for w in worlds]).astype(np.float64)
        self.fog = np.zeros(B, dtype=bool)
        self.alive = np.ones(B, dtype=bool)
        self.status = ["horizon"] * B
        self.t = 0

    def observe(self):
        """Observations at the current step: (position fix, features, fog flags)."""
        env, t = self.env, self.t
        vis = np.where(self.fog, env.fog_visibility, 1.0)[:, None]
        diff = self.pos[:, None, :] - self.landmarks
        resp = np.exp(-0.5 * np.sum(diff * diff, axis=-1) / env.rbf_length ** 2)
        clean = np.hstack([vis * resp, vis])
        feats = clean + env.feat_noise * self.feat_noise[:, t]
        std = np.where(self.fog, env.fog_pos_noise, env.pos_noise)[:, None]
        pos_obs = self.body_position() + std * self.pos_noise[:, t]
        return pos_obs, feats, self.fog.copy()

    def body_position(self):
        return np.einsum("bij,bj->bi", self.rot, self.pos - self.starts)

    def expert(self):
        """Expert waypoints in each episode's body frame."""
        w = _expert(self.paths, self.lens, self.targets, self.pos, self.env)
        return np.einsum("bij,bj->bi", self.rot, w)

    def move(self, w_exec, stop_mask=None):
        """Apply executed body-frame waypoints (metres) to alive, non-stopping episodes."""
        env, t = self.env, self.t
        moving = self.alive.copy()
        if stop_mask is not None:
            for b in np.flatnonzero(moving & stop_mask):
                self.status[b] = "stopped"
            moving &= ~stop_mask
            self.alive &= ~stop_mask
        disp = np.einsum("bji,bj->bi", self.rot, w_exec) + self.wind + env.act_noise * self.act_noise[:, t]
        self.pos = np.where(moving[:, None], self.pos + disp, self.pos)
        d_lm = np.linalg.norm(self.pos[:, None, :] - self.landmarks, axis=-1).min(axis=1)
        out = self.outside(self.body_position(), self.pos[:, 2])
        for b in np.flatnonzero(moving & (d_lm < env.landmark_radius)):
            self.status[b] = "collision"
            self.alive[b] = False
        for b in np.flatnonzero(moving & out & self.alive):
            self.status[b] = "out_of_arena"
            self.alive[b] = False
        # fog transitions
        u = self.fog_u[:, t + 1]
        self.fog = np.where(self.fog, u >= env.fog_exit, u < env.fog_enter)
        self.t += 1
        return moving

    def outside(self, body, alt):
        env = self.env
        return ((body[:, 0] < ARENA_X[0]) | (body[:, 0] > ARENA_X[1])
                | (np.abs(body[:, 1]) > env.arena_half_width) | (alt < 0) | (alt > env.alt_max + 50.0))

    def abort(self, mask, status="nan"):
        for b in np.flatnonzero(mask & self.alive):
            self.status[b] = status
        self.alive &= ~mask


def build_encoder_inputs(feats, pos_obs, goals, banks: list[MemoryBank], env: EnvConfig, scale=None):
    ev = np.empty_like(feats)
    for b, bank in enumerate(banks):
        ev[b] = retrieve(feats[b], bank, scale).evidence
    return encoder_input(feats, ev, goals, pos_obs, env.pos_scale)


def rollout_batch(model, worlds: list[World], mode: str = "closed_loop", env: EnvConfig | None = None,
                  memory: MemoryConfig | None = None, noise_seed: int = 0, gain_override=None,
                  horizon: int | None = None, keep_observations: bool = True) -> list[Episode]:
    """Run B episodes with shared read-only parameters.

    Per step: observe, retrieve, encode, predict the prior from the previous
    posterior, gain, fuse, decode the waypoint, move, then store the feature
    if the confidence clears the threshold.
    """
    env = env or EnvConfig()
    memory = memory or MemoryConfig()
    if mode not in ("closed_loop", "teacher_forced"):
        raise ConfigError(f"unknown rollout mode {mode!r}")
    eb = EnvBatch(worlds, env, noise_seed, horizon)
    B = eb.B
    banks = [MemoryBank(memory.capacity, memory.threshold) for _ in range(B)]
    positions = [[w.start.copy()] for w in worlds]
    waypoints = [[] for _ in range(B)]
    obs_log = [[] for _ in range(B)]
    sig_log = [[] for _ in range(B)]
    gain_log = [[] for _ in range(B)]
    store_log = [[] for _ in range(B)]
    z = h = w_prev = None
    for t in range(eb.horizon):
        if not eb.alive.any():
            break
        pos_obs, feats, _ = eb.observe()
        enc_in = build_encoder_inputs(feats, pos_obs, eb.goals, banks, env)
        if t == 0:
            out, _ = model.first_step(enc_in)
        else:
            out, _ = model.next_step(z, h, w_prev, enc_in, gain_override)
        bad = ~np.all(np.isfinite(out.z), axis=1) | ~np.all(np.isfinite(out.h), axis=1)
        if bad.any():
            eb.abort(bad)
        if mode == "closed_loop":
            w_exec = clip_norm(np.nan_to_num(out.w_post) * env.max_step, env.max_step)
            stop = np.linalg.norm(w_exec, axis=1) < env.stop_eps * env.max_step
        else:
            w_exec = eb.expert()
            stop = np.linalg.norm(w_exec, axis=1) == 0.0
        alive_before = eb.alive.copy()
        moved = eb.move(w_exec, stop)
        for b in np.flatnonzero(alive_before):
            if keep_observations:
                obs_log[b].append(Observation(pos_obs[b], feats[b], eb.goals[b]))
            sig_log[b].append(float(out.sigma[b]))
            gain_log[b].append(float(np.mean(out.gain[b])))
            stored = bool(banks[b].try_store(feats[b], t, float(out.sigma[b]))) if np.isfinite(out.sigma[b]) else False
            store_log[b].append(stored)
            if moved[b]:
                positions[b].append(eb.pos[b].copy())
                waypoints[b].append(w_exec[b].copy())
        z, h, w_prev = out.z, out.h, w_exec / env.max_step
    episodes = []
    for b, w in enumerate(worlds):
        episodes.append(Episode(
            world=w, agent_positions=np.array(positions[b]),
            executed_waypoints=np.array(waypoints[b]).reshape(-1, 3), observations=obs_log[b],
            horizon=eb.horizon, sigma=np.array(sig_log[b]), mean_gain=np.array(gain_log[b]),
            stored=np.array(store_log[b], dtype=bool), status=eb.status[b]))
    return episodes


def rollout(model, world: World, mode: str = "closed_loop", env: EnvConfig | None = None,
            memory: MemoryConfig | None = None, noise_seed: int = 0, gain_override=None,
            horizon: int | None = None) -> Episode:
    return rollout_batch(model, [world], mode, env, memory, noise_seed, gain_override, horizon)[0]


def rollout_many(model, worlds, mode="closed_loop", env=None, memory=None, noise_seed=0,
                 gain_override=None, batch: int = 32, threads: int | None = None, **kw) -> list[Episode]:
    """Chunked ``rollout_batch`` over many worlds, optionally on a thread pool.

    Chunks are independent and results are concatenated in world order.
    """
    chunks = [worlds[i:i + batch] for i in range(0, len(worlds), batch)]
    run = lambda ch: rollout_batch(model, ch, mode, env, memory, noise_seed, gain_override, **kw)
    threads = threads if threads is not None else rollout_threads()
    if threads > 1 and len(chunks) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(ch) for ch in chunks]
    return [ep for r in results for ep in r]


def rollout_threads() -> int:
    import os
    try:
        return max(1, int(os.environ.get("NEUROKALMAN_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- metrics

def path_length(positions) -> float:
    return float(np.linalg.norm(np.diff(positions, axis=0), axis=1).sum()) if len(positions) > 1 else 0.0


def compute_metrics(episodes: list[Episode], success_radius: float = 20.0) -> MetricReport:
    if not episodes:
        raise ConfigError("compute_metrics needs at least one episode")
    rows = []
    for i, ep in enumerate(episodes):
        target = ep.world.target
        dists = np.linalg.norm(ep.agent_positions - target, axis=1)
        final = float(dists[-1])
        success = final < success_radius and not ep.failed
        oracle = float(dists.min()) < success_radius
        l = ep.world.distance
        p = path_length(ep.agent_positions)
        spl = (l / max(p, l)) if success else 0.0
        rows.append({"episode": i, "seed": ep.world.seed, "difficulty": ep.world.difficulty,
                     "distance": l, "final_distance": final, "min_distance": float(dists.min()),
                     "path_length": p, "success": int(success), "oracle_success": int(oracle),
                     "spl": spl, "steps": len(ep.executed_waypoints), "status": ep.status})
    n = len(rows)
    return MetricReport(ne=sum(r["final_distance"] for r in rows) / n,
                        sr=sum(r["success"] for r in rows) / n,
                        osr=sum(r["oracle_success"] for r in rows) / n,
                        spl=sum(r["spl"] for r in rows) / n, rows=rows)


def tracking_errors(ep: Episode):
    """Per-position distance to the ground-truth route and the matched route point."""
    errs, gts = [], []
    for p in ep.agent_positions:
        e, g = path_distance(ep.world.path, p)
        errs.append(e)
        gts.append(g)
    return np.array(errs), np.array(gts)


TRACE_COLUMNS = ["step", "x", "y", "z", "gt_x", "gt_y", "gt_z", "l2_error", "sigma", "mean_gain", "stored_anchor"]


def write_trace(ep: Episode, path) -> None:
    errs, gts = tracking_errors(ep)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for t, p in enumerate(ep.agent_positions):
            sig = ep.sigma[t] if t < len(ep.sigma) else float("nan")
            gain = ep.mean_gain[t] if t < len(ep.mean_gain) else float("nan")
            st = int(ep.stored[t]) if t < len(ep.stored) else 0
            w.writerow([t, *(f"{v:.6f}" for v in p), *(f"{v:.6f}" for v in gts[t]),
                        f"{errs[t]:.6f}", f"{sig:.6f}", f"{gain:.6f}", st])

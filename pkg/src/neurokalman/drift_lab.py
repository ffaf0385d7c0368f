"""Drift experiments: error-over-time curves, the error-contraction recursion,
and the gain / memory / aux-loss ablations.

Position error (distance from the agent to the ground-truth route) stands in
for the unobservable latent error.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .sim_env import World, rollout_many, tracking_errors


@dataclass
class DriftCurve:
    steps: list[int]
    mean_error: list[float]
    n_alive: list[int]

    def __post_init__(self):
        if not len(self.steps) == len(self.mean_error) == len(self.n_alive):
            raise ValueError("DriftCurve fields must have equal lengths")

    def at(self, step: int) -> float:
        return self.mean_error[self.steps.index(step)]


@dataclass
class ContractionTrace:
    epsilon: list[float]
    bound: list[float]
    lambda_est: float
    xi_est: float
    gain: float
    fixed_point: float | None
    diverged: bool
    # fraction of steps with epsilon <= bound; None when not applicable
    satisfaction: float | None = None
    note: str = ""


# ---------------------------------------------------------------- curves

def episode_errors(episodes) -> list[np.ndarray]:
    return [tracking_errors(ep)[0] for ep in episodes]


def curve_from_errors(errors: list[np.ndarray], horizon: int) -> DriftCurve:
    """Mean over the episodes still running at each step (those with a position at t)."""
    steps, mean, alive = [], [], []
    for t in range(horizon + 1):
        vals = [e[t] for e in errors if len(e) > t]
        if not vals:
            break
        steps.append(t)
        mean.append(math.fsum(vals) / len(vals))
        alive.append(len(vals))
    return DriftCurve(steps, mean, alive)


def drift_curve(model, worlds: list[World], horizon: int | None = None, env=None, memory=None,
                noise_seed: int = 0, gain_override=None) -> DriftCurve:
    env = env or RunConfig().env
    horizon = env.horizon if horizon is None else horizon
    eps = rollout_many(model, worlds, "closed_loop", env, memory, noise_seed, gain_override,
                       horizon=horizon, keep_observations=False)
    return curve_from_errors(episode_errors(eps), horizon)


# ---------------------------------------------------------------- contraction

def contraction_check(lambda_gru: float, K: float, xi: float, eps0: float, steps: int) -> ContractionTrace:
    """Iterate eps_t = (1 - K) lambda eps_{t-1} + K xi.

    ``bound`` is the closed form fp + (eps0 - fp) a^t with a = (1 - K) lambda;
    when a = 1 there is no fixed point and the bound is eps0 + t K xi.
    """
    if lambda_gru <= 0 or xi < 0 or eps0 < 0 or not 0.0 <= K <= 1.0:
        raise ValueError("contraction_check needs lambda > 0, xi >= 0, eps0 >= 0 and K in [0, 1]")
    a = (1.0 - K) * lambda_gru
    eps = [float(eps0)]
    for _ in range(steps):
        eps.append(a * eps[-1] + K * xi)
    if a != 1.0:
        fp = K * xi / (1.0 - a)
        bound = [fp + (eps0 - fp) * a ** t for t in range(steps + 1)]
    else:
        fp = None
        bound = [eps0 + t * K * xi for t in range(steps + 1)]
    diverged = a >= 1.0
    return ContractionTrace(epsilon=eps, bound=bound, lambda_est=float(lambda_gru), xi_est=float(xi),
                            gain=float(K), fixed_point=None if diverged else fp, diverged=diverged)


def fit_growth(errors, start: int = 0, stop: int | None = None) -> float:
    """Per-step growth ratio from a least-squares line through log(error) vs step."""
    e = np.asarray(errors, dtype=np.float64)[start:stop]
    t = np.arange(len(e), dtype=np.float64)
    ok = e > 0
    if ok.sum() < 2:
        raise ValueError("need at least two positive errors to fit a growth rate")
    slope = np.polyfit(t[ok], np.log(e[ok]), 1)[0]
    return float(np.exp(slope))


def contraction_from_errors(baseline, full, measurement, gain: float, fit_window=(1, None)) -> ContractionTrace:
    """Empirical bound check from three mean-error curves.

    lambda is fitted on the dead-reckoning ``baseline``; xi bounds the
    measurement error, so it is the largest value of the measurement-only
    curve. The recursion started at full[0] is the bound the ``full`` curve
    should stay under.
    """
    baseline = np.asarray(baseline, dtype=np.float64)
    full = np.asarray(full, dtype=np.float64)
    lam = fit_growth(baseline, *fit_window)
    xi = float(np.max(measurement))
    if lam <= 1.0:
        return ContractionTrace(epsilon=list(full), bound=[], lambda_est=lam, xi_est=xi, gain=gain,
                                fixed_point=None, diverged=False, satisfaction=None,
                                note="not applicable: baseline error does not grow")
    tr = contraction_check(lam, gain, xi, float(full[0]), len(full) - 1)
    bound = np.asarray(tr.epsilon)
    sat = float(np.mean(full <= bound + 1e-12))
    return ContractionTrace(epsilon=list(full), bound=list(bound), lambda_est=lam, xi_est=xi, gain=gain,
                            fixed_point=tr.fixed_point, diverged=tr.diverged, satisfaction=sat)


def empirical_contraction(model, worlds: list[World], env=None, memory=None, noise_seed: int = 0,
                          horizon: int | None = None) -> ContractionTrace:
    """Estimate lambda and xi from gain-0 and gain-1 rollouts and check the full model's curve."""
    env = env or RunConfig().env
    horizon = env.horizon if horizon is None else horizon
    base = drift_curve(model, worlds, horizon, env, memory, noise_seed, gain_override=0.0)
    meas = drift_curve(model, worlds, horizon, env, memory, noise_seed, gain_override=1.0)
    eps = rollout_many(model, worlds, "closed_loop", env, memory, noise_seed, horizon=horizon,
                       keep_observations=False)
    full = curve_from_errors(episode_errors(eps), horizon)
    gain = float(np.mean(np.concatenate([e.mean_gain[1:] for e in eps if len(e.mean_gain) > 1])))
    n = min(len(base.steps), len(full.steps))
    return contraction_from_errors(base.mean_error[:n], full.mean_error, meas.mean_error, gain)


def planted_system(lam: float, steps: int = 200, gain: float = 0.5, xi: float = 0.5,
                   eps0: float = 1.0, noise: float = 0.01, seed: int = 0):
    """Synthetic scalar error dynamics with a known growth ratio ``lam``.

    Returns (baseline, full, measurement) error curves: the baseline grows as
    lam^t with multiplicative log-normal jitter, the measurement error is a
    half-normal with mean ``xi``, and the full curve runs the gain-``gain``
    recursion driven by those per-step measurement errors.
    """
    rng = np.random.default_rng(seed)
    base = eps0 * lam ** np.arange(steps + 1) * np.exp(noise * rng.standard_normal(steps + 1))
    meas = xi * np.abs(rng.standard_normal(steps + 1)) * math.sqrt(math.pi / 2)
    full = [eps0]
    for t in range(1, steps + 1):
        full.append((1 - gain) * lam * full[-1] + gain * meas[t])
    return base, np.array(full), meas


# ---------------------------------------------------------------- ablations

ABLATIONS = {
    "gain": [("fixed_0.1", {"model": {"gain_mode": "fixed", "fixed_gain": 0.1}}),
             ("fixed_0.5", {"model": {"gain_mode": "fixed", "fixed_gain": 0.5}}),
             ("fixed_0.9", {"model": {"gain_mode": "fixed", "fixed_gain": 0.9}}),
             ("learnable", {"model": {"gain_mode": "learnable"}})],
    "memory": [("M=5", {"memory": {"capacity": 5}}),
               ("M=10", {"memory": {"capacity": 10}}),
               ("M=15", {"memory": {"capacity": 15}})],
    "aux": [("aux_on", {"train": {"aux_coeff": 0.2}}),
            ("aux_off", {"train": {"aux_coeff": 0.0}})],
}

ABLATION_COLUMNS = ["variant", "seed", "ne", "sr", "osr", "spl"]


@dataclass
class AblationTable:
    kind: str
    rows: list[dict] = field(default_factory=list)
    reports: list = field(default_factory=list, repr=False)

    def variants(self) -> list[str]:
        out = []
        for r in self.rows:
            if r["variant"] not in out:
                out.append(r["variant"])
        return out

    def summary(self) -> list[dict]:
        """Mean and std over seeds per variant, in variant order."""
        out = []
        for v in self.variants():
            rs = [r for r in self.rows if r["variant"] == v]
            row = {"variant": v, "n_seeds": len(rs)}
            for k in ("ne", "sr", "osr", "spl"):
                vals = np.array([r[k] for r in rs])
                row[k] = float(math.fsum(vals) / len(vals))
                row[k + "_std"] = float(vals.std())
            out.append(row)
        return out

    def mean(self, variant: str, metric: str) -> float:
        return next(r[metric] for r in self.summary() if r["variant"] == variant)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ABLATION_COLUMNS)
            for r in self.rows:
                w.writerow([r["variant"], r["seed"]] + [f"{r[k]:.10g}" for k in ABLATION_COLUMNS[2:]])

    def write_summary_csv(self, path) -> None:
        cols = ["variant", "n_seeds", "ne", "ne_std", "sr", "sr_std", "osr", "osr_std", "spl", "spl_std"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.summary():
                w.writerow([r["variant"], r["n_seeds"]] + [f"{r[k]:.10g}" for k in cols[2:]])

    def render(self) -> str:
        lines = [f"ablation: {self.kind}", "",
                 "| variant | NE (m) | SR | OSR | SPL |", "|---|---|---|---|---|"]
        for r in self.summary():
            lines.append(f"| {r['variant']} | {r['ne']:.2f} ± {r['ne_std']:.2f} | {r['sr']:.3f} | "
                         f"{r['osr']:.3f} | {r['spl']:.3f} |")
        return "\n".join(lines) + "\n"


def variant_config(cfg: RunConfig, overrides: dict, seed: int) -> RunConfig:
    sections = {k: dict(v) for k, v in overrides.items()}
    sections.setdefault("train", {})["seed"] = seed
    sections.setdefault("model", {})["init_seed"] = seed
    return cfg.with_overrides(**sections)


@dataclass
class TrainedVariant:
    model: object
    train_seconds: float


def trained_variant(vcfg: RunConfig, cache: dict | None = None) -> TrainedVariant:
    """Train ``vcfg`` once; ``cache`` maps config hashes to finished runs."""
    from .trainer import train_from_config

    key = vcfg.config_hash()
    if cache is not None and key in cache:
        return cache[key]
    t0 = time.perf_counter()
    model, _ = train_from_config(vcfg)
    out = TrainedVariant(model, time.perf_counter() - t0)
    if cache is not None:
        cache[key] = out
    return out


def run_ablation(kind: str, cfg: RunConfig, seeds=(0, 1, 2), test_worlds: list[World] | None = None,
                 progress=None, cache: dict | None = None) -> AblationTable:
    """Train every variant of ``kind`` for each seed under the same budget and evaluate it.

    All variants share the training worlds, the test worlds and the
    evaluation noise stream. Variants whose config matches an entry of
    ``cache`` (e.g. M=10 and the learnable gain) are trained only once.
    """
    from .trainer import eval_worlds, evaluate

    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; expected one of {sorted(ABLATIONS)}")
    test_worlds = test_worlds if test_worlds is not None else eval_worlds(cfg)
    table = AblationTable(kind)
    for seed in seeds:
        for name, ov in ABLATIONS[kind]:
            vcfg = variant_config(cfg, ov, seed)
            tv = trained_variant(vcfg, cache)
            rep = evaluate(tv.model, test_worlds, vcfg.env, vcfg.memory, noise_seed=vcfg.eval.seed_offset)
            row = {"variant": name, "seed": seed, "ne": rep.ne, "sr": rep.sr, "osr": rep.osr, "spl": rep.spl}
            table.rows.append(row)
            table.reports.append(rep)
            if progress is not None:
                progress(row)
    return table


# ---------------------------------------------------------------- plots

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def svg_line_plot(series: dict, path, title: str = "", xlabel: str = "step", ylabel: str = "error (m)",
                  width: int = 640, height: int = 400) -> None:
    """Write a self-contained SVG with one polyline per ``name -> (x, y)`` entry."""
    ml, mr, mt, mb = 60, 150, 30, 45
    xs = [float(v) for x, _ in series.values() for v in x]
    ys = [float(v) for _, y in series.values() for v in y if math.isfinite(v)]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = 0.0, (max(ys) if ys else 1.0)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml + pw / 2:.1f}" y="18" text-anchor="middle">{_esc(title)}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{px(xv):.1f}" y="{mt + ph + 15}" text-anchor="middle">{xv:.0f}</text>')
        out.append(f'<text x="{ml - 5}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for i, (name, (x, y)) in enumerate(series.items()):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(float(a)):.2f},{py(float(b)):.2f}" for a, b in zip(x, y) if math.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        ly = mt + 15 + 18 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 30}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 35}" y="{ly + 4}">{_esc(name)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_curves_csv(curves: dict, path) -> None:
    """Long-format CSV: curve, step, mean_error, n_alive."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "step", "mean_error", "n_alive"])
        for name, c in curves.items():
            for s, e, n in zip(c.steps, c.mean_error, c.n_alive):
                w.writerow([name, s, f"{e:.10g}", n])


def write_contraction_csv(trace: ContractionTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epsilon", "bound", "fixed_point", "lambda_est", "xi_est", "gain", "diverged"])
        fp = "" if trace.fixed_point is None else f"{trace.fixed_point:.17g}"
        for t, e in enumerate(trace.epsilon):
            b = trace.bound[t] if t < len(trace.bound) else float("nan")
            w.writerow([t, f"{e:.17g}", f"{b:.17g}", fp, f"{trace.lambda_est:.17g}",
                        f"{trace.xi_est:.17g}", f"{trace.gain:.17g}", int(trace.diverged)])

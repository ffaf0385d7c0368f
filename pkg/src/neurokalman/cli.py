"""Command-line entry point: ``neurokalman {train,eval,lab,verify}``.

Exit codes: 0 success, 1 usage or config error, 2 runtime or numerical
failure, 3 property-suite failure. Every output directory gets a
``manifest.json`` (artifacts with sha256 plus the config hash) and is guarded
by a lock file while a command writes to it.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, NumericalError

log = logging.getLogger("neurokalman")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PROPERTY = 0, 1, 2, 3
LOCK_NAME = ".neurokalman.lock"
CHECKPOINT_NAME = "model.nkpt"
EXPERIMENTS = ("drift", "contraction", "ablate-gain", "ablate-memory", "ablate-aux")
METRIC_COLUMNS = ["row", "split", "episode", "seed", "difficulty", "distance", "final_distance",
                  "min_distance", "path_length", "steps", "status", "ne", "sr", "osr", "spl"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- output plumbing

class RunDir:
    """Output directory holding artifacts, a manifest and (while running) a lock."""

    def __init__(self, path, command: str, cfg: RunConfig | None):
        self.path = Path(path)
        self.command = command
        self.cfg = cfg
        self.artifacts: list[str] = []

    def file(self, name: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if name not in self.artifacts:
            self.artifacts.append(name)
        return p

    @contextmanager
    def locked(self):
        self.path.mkdir(parents=True, exist_ok=True)
        lock = self.path / LOCK_NAME
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"output directory {self.path} is locked by another run ({lock})") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        try:
            yield self
        finally:
            lock.unlink(missing_ok=True)

    def write_manifest(self, extra: dict | None = None) -> None:
        entries = []
        for name in self.artifacts:
            p = self.path / name
            if p.is_file():
                entries.append({"path": name, "sha256": _sha256(p), "bytes": p.stat().st_size})
        manifest = {"command": self.command,
                    "config_hash": self.cfg.config_hash() if self.cfg is not None else None,
                    "artifacts": entries}
        if extra:
            manifest.update(extra)
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _threads() -> int:
    raw = os.environ.get("NEUROKALMAN_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"NEUROKALMAN_THREADS must be a positive integer, got {raw!r}")
    return n


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {args.seed}")
        cfg = cfg.with_overrides(run={"seed": args.seed}, train={"seed": args.seed},
                                 model={"init_seed": args.seed})
    if getattr(args, "out", None):
        cfg = cfg.with_overrides(run={"out": args.out})
    return cfg


def load_model(cfg: RunConfig, path):
    """Model from ``cfg`` with the gain mode recorded in the checkpoint, shapes checked."""
    from .nn_core import check_shapes, load_checkpoint
    from .trainer import build_model

    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    params, meta = load_checkpoint(path)
    mcfg = cfg.model
    saved = meta.get("model", {}) if isinstance(meta, dict) else {}
    if "gain_mode" in saved:
        mcfg = dataclasses.replace(mcfg, gain_mode=saved["gain_mode"], fixed_gain=saved.get("fixed_gain", mcfg.fixed_gain))
    model = build_model(dataclasses.replace(cfg, model=mcfg))
    check_shapes(model.params, params)
    model.params = params
    return model, meta


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .nn_core import save_checkpoint
    from .trainer import TrainingDiverged, train_from_config

    cfg = resolve_config(args)
    run = RunDir(cfg.run.out, "train", cfg)
    with run.locked():
        run.file("config.ini").write_text(dump_config(cfg))
        try:
            model, report = train_from_config(cfg)
        except TrainingDiverged as exc:
            exc.report.write_csv(run.file("training_curve.csv"))
            run.write_manifest({"status": "diverged"})
            raise
        report.write_csv(run.file("training_curve.csv"))
        meta = model.meta()
        meta["config_hash"] = cfg.config_hash()
        save_checkpoint(run.file(CHECKPOINT_NAME), model.params, meta)
        run.write_manifest({"status": "ok", "updates": report.updates})
    print(run.path / CHECKPOINT_NAME)
    return EXIT_OK


def write_metrics_csv(rep, split: str, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        w.writerow(["summary", split, "", "", "", "", "", "", "", "", "",
                    f"{rep.ne:.10g}", f"{rep.sr:.10g}", f"{rep.osr:.10g}", f"{rep.spl:.10g}"])
        for r in rep.rows:
            w.writerow(["episode", split, r["episode"], r["seed"], r["difficulty"], f"{r['distance']:.10g}",
                        f"{r['final_distance']:.10g}", f"{r['min_distance']:.10g}", f"{r['path_length']:.10g}",
                        r["steps"], r["status"], f"{r['final_distance']:.10g}", r["success"],
                        r["oracle_success"], f"{r['spl']:.10g}"])


def cmd_eval(args) -> int:
    from .sim_env import compute_metrics, rollout_many, write_trace
    from .trainer import eval_worlds

    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    cfg = resolve_config(args)
    model, _ = load_model(cfg, args.checkpoint[0])
    worlds = eval_worlds(cfg, args.split)
    run = RunDir(cfg.run.out, "eval", cfg)
    with run.locked():
        eps = rollout_many(model, worlds, "closed_loop", cfg.env, cfg.memory,
                           noise_seed=cfg.eval.seed_offset + cfg.run.seed, threads=_threads(),
                           keep_observations=False)
        rep = compute_metrics(eps, cfg.env.success_radius)
        write_metrics_csv(rep, args.split, run.file(f"metrics_{args.split}.csv"))
        for i, ep in enumerate(eps):
            write_trace(ep, run.file(f"traces/episode_{i:04d}.csv"))
        run.write_manifest({"split": args.split, "checkpoint_sha256": _sha256(args.checkpoint[0])})
    print(f"split={args.split} n={len(eps)} NE={rep.ne:.3f} SR={rep.sr:.3f} OSR={rep.osr:.3f} SPL={rep.spl:.3f}")
    return EXIT_OK


def _lab_drift(cfg, args, run):
    from . import drift_lab as dl
    from .trainer import eval_worlds

    if not args.checkpoint:
        raise UsageError("drift needs at least one --checkpoint")
    worlds = eval_worlds(cfg, "hard", cfg.lab.n_seeds)
    noise = cfg.eval.seed_offset + cfg.run.seed
    curves = {}
    for path in args.checkpoint:
        model, _ = load_model(cfg, path)
        curves[Path(path).stem if len(args.checkpoint) > 1 else "full"] = dl.drift_curve(
            model, worlds, cfg.env.horizon, cfg.env, cfg.memory, noise)
    if len(args.checkpoint) == 1:
        curves["dead_reckoning"] = dl.drift_curve(model, worlds, cfg.env.horizon, cfg.env, cfg.memory, noise,
                                                  gain_override=0.0)
    dl.write_curves_csv(curves, run.file("drift.csv"))
    dl.svg_line_plot({k: (c.steps, c.mean_error) for k, c in curves.items()}, run.file("drift.svg"),
                     title="mean L2 error to the route", xlabel="step", ylabel="error (m)")
    with open(run.file("drift_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "error_50", "error_150", "ratio_150_50"])
        for k, c in curves.items():
            e50 = c.at(50) if 50 in c.steps else float("nan")
            e150 = c.at(150) if 150 in c.steps else float("nan")
            w.writerow([k, f"{e50:.10g}", f"{e150:.10g}", f"{e150 / e50:.10g}"])


def _lab_contraction(cfg, args, run):
    from . import drift_lab as dl
    from .trainer import eval_worlds

    lab = cfg.lab
    traces = {"configured": dl.contraction_check(lab.lambda_gru, lab.gain, lab.xi, lab.eps0, lab.steps),
              "planted": dl.contraction_check(lab.planted_lambda, lab.gain, lab.xi, lab.eps0, lab.steps),
              "dead_reckoning": dl.contraction_check(lab.lambda_gru, 0.0, lab.xi, lab.eps0, lab.steps)}
    for name, tr in traces.items():
        dl.write_contraction_csv(tr, run.file(f"contraction_{name}.csv"))
    base, full, meas = dl.planted_system(lab.planted_lambda, lab.steps, lab.gain, lab.xi, lab.eps0,
                                         seed=cfg.run.seed)
    planted = dl.contraction_from_errors(base, full, meas, lab.gain)
    with open(run.file("contraction_fit.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "true_lambda", "fitted_lambda", "satisfaction"])
        w.writerow(["planted", f"{lab.planted_lambda:.17g}", f"{planted.lambda_est:.17g}",
                    f"{planted.satisfaction:.10g}"])
        if args.checkpoint:
            model, _ = load_model(cfg, args.checkpoint[0])
            emp = dl.empirical_contraction(model, eval_worlds(cfg, "hard", lab.n_seeds), cfg.env, cfg.memory,
                                           cfg.eval.seed_offset + cfg.run.seed)
            sat = "" if emp.satisfaction is None else f"{emp.satisfaction:.10g}"
            w.writerow(["trained_model", "", f"{emp.lambda_est:.17g}", sat])
            dl.write_contraction_csv(emp, run.file("contraction_empirical.csv"))
    dl.svg_line_plot({k: (list(range(len(t.epsilon))), t.epsilon) for k, t in traces.items() if not t.diverged},
                     run.file("contraction.svg"), title="error recursion", ylabel="epsilon")


def _lab_ablation(kind, cfg, args, run):
    from . import drift_lab as dl

    seeds = [cfg.run.seed + i for i in range(cfg.lab.replicates)]
    table = dl.run_ablation(kind, cfg, seeds, progress=lambda r: log.info("ablation %s %s", kind, r))
    table.write_csv(run.file(f"ablation_{kind}.csv"))
    table.write_summary_csv(run.file(f"ablation_{kind}_summary.csv"))
    run.file(f"ablation_{kind}.md").write_text(table.render())
    print(table.render())


def cmd_lab(args) -> int:
    if args.experiment not in EXPERIMENTS:
        raise UsageError(f"--experiment must be one of {', '.join(EXPERIMENTS)}")
    cfg = resolve_config(args)
    for path in args.checkpoint or []:
        if not Path(path).is_file():
            raise ConfigError(f"checkpoint not found: {path}")
    run = RunDir(cfg.run.out, f"lab {args.experiment}", cfg)
    with run.locked():
        if args.experiment == "drift":
            _lab_drift(cfg, args, run)
        elif args.experiment == "contraction":
            _lab_contraction(cfg, args, run)
        else:
            _lab_ablation(args.experiment.split("-", 1)[1], cfg, args, run)
        run.write_manifest({"experiment": args.experiment})
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    results = run_suite(mutations=tuple(args.mutate or ()), quick=not args.full)
    summary = {"passed": all(r.passed for r in results), "properties": [r.to_dict() for r in results],
               "failing": [r.name for r in results if not r.passed]}
    text = json.dumps(summary, indent=2, default=float)
    print(text)
    if args.out:
        run = RunDir(args.out, "verify", None)
        with run.locked():
            run.file("verify.json").write_text(text + "\n")
            run.write_manifest()
    if not summary["passed"]:
        print("failing properties: " + ", ".join(summary["failing"]), file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neurokalman", description="Learned recursive Bayesian navigation filter")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="INI run config")
        sp.add_argument("--seed", type=int, help="overrides [run] seed, [train] seed and [model] init_seed")
        sp.add_argument("--out", help="output directory (overrides [run] out)")
        if checkpoint:
            sp.add_argument("--checkpoint", action="append", help="checkpoint path (repeatable for lab drift)")

    common(sub.add_parser("train", help="train a model and write a checkpoint"))
    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(ev, checkpoint=True)
    ev.add_argument("--split", choices=("easy", "hard", "full"), default="full")
    lab = sub.add_parser("lab", help="run a drift / contraction / ablation experiment")
    common(lab, checkpoint=True)
    lab.add_argument("--experiment", required=True, help=" | ".join(EXPERIMENTS))
    ver = sub.add_parser("verify", help="run the property suite")
    ver.add_argument("--out", help="also write verify.json and a manifest here")
    ver.add_argument("--mutate", action="append", help="inject a known bug (attention-scale) to test the suite")
    ver.add_argument("--full", action="store_true", help="exhaustive gradient checks and 1e5 memory sequences")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "lab": cmd_lab, "verify": cmd_verify}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO if os.environ.get("NEUROKALMAN_VERBOSE") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if getattr(args, "mutate", None):
            from .verify import MUTATIONS
            bad = [m for m in args.mutate if m not in MUTATIONS]
            if bad:
                raise UsageError(f"unknown mutation {bad[0]!r}; expected one of {MUTATIONS}")
        _threads()
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"neurokalman: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, RuntimeError, OSError, ValueError) as exc:
        print(f"neurokalman: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Train the full model on a config, then write drift curves (full vs K=0) and
the empirical contraction check for it.

    python scripts/drift_experiment.py --config configs/default.ini --out runs/drift
"""
import argparse
import csv
import logging
import time
from pathlib import Path

from neurokalman import drift_lab as dl
from neurokalman.config import load_config
from neurokalman.nn_core import save_checkpoint
from neurokalman.trainer import eval_worlds, train_from_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.ini")
    ap.add_argument("--out", default="runs/drift")
    ap.add_argument("--seeds", type=int, default=None, help="number of hard test worlds (default [lab] n_seeds)")
    ap.add_argument("--horizon", type=int, default=150)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    model, report = train_from_config(cfg)
    report.write_csv(out / "training_curve.csv")
    save_checkpoint(out / "model.nkpt", model.params, model.meta())
    t_train = time.perf_counter() - t0

    worlds = eval_worlds(cfg, "hard", args.seeds or cfg.lab.n_seeds)
    noise = cfg.eval.seed_offset
    curves = {
        "full": dl.drift_curve(model, worlds, args.horizon, cfg.env, cfg.memory, noise),
        "dead_reckoning": dl.drift_curve(model, worlds, args.horizon, cfg.env, cfg.memory, noise, gain_override=0.0),
        "measurement_only": dl.drift_curve(model, worlds, args.horizon, cfg.env, cfg.memory, noise, gain_override=1.0),
    }
    dl.write_curves_csv(curves, out / "drift.csv")
    dl.svg_line_plot({k: (c.steps, c.mean_error) for k, c in curves.items()}, out / "drift.svg",
                     title="mean L2 error to the route")
    emp = dl.empirical_contraction(model, worlds, cfg.env, cfg.memory, noise, args.horizon)
    dl.write_contraction_csv(emp, out / "contraction_empirical.csv")

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "error_50", "error_150", "ratio"])
        for k, c in curves.items():
            w.writerow([k, f"{c.at(50):.4f}", f"{c.at(150):.4f}", f"{c.at(150) / c.at(50):.4f}"])
    for k, c in curves.items():
        print(f"{k:18s} e50 {c.at(50):7.2f}  e150 {c.at(150):7.2f}  x{c.at(150) / c.at(50):.2f}")
    sat = "n/a" if emp.satisfaction is None else f"{emp.satisfaction:.3f}"
    print(f"fitted lambda {emp.lambda_est:.4f}  xi {emp.xi_est:.2f}  mean gain {emp.gain:.3f}  bound held {sat}  {emp.note}")
    print(f"train {t_train:.0f} s, total {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()

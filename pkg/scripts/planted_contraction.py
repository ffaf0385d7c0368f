"""Recover a planted growth ratio from synthetic error curves and check the
contraction bound on them, across a grid of gains.

    python scripts/planted_contraction.py --lam 1.05 --steps 200
"""
import argparse

import numpy as np

from neurokalman import drift_lab as dl


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lam", type=float, default=1.05)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--xi", type=float, default=0.5)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    print("gain  seed  fitted_lambda  bound_held  fixed_point")
    for gain in (0.1, 0.3, 0.5, 0.9):
        for seed in range(args.seeds):
            base, full, meas = dl.planted_system(args.lam, args.steps, gain, args.xi, seed=seed)
            tr = dl.contraction_from_errors(base, full, np.full_like(meas, meas.max()), gain)
            fp = "none" if tr.fixed_point is None else f"{tr.fixed_point:.4f}"
            print(f"{gain:4.1f}  {seed:4d}  {tr.lambda_est:13.6f}  {tr.satisfaction:10.3f}  {fp}")


if __name__ == "__main__":
    main()

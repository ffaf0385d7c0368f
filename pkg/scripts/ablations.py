"""Run the gain, memory and aux-loss ablations with a shared model cache and
write one CSV, summary CSV and markdown table per ablation.

    python scripts/ablations.py --config configs/default.ini --seeds 0 1 2 --out runs/ablations
"""
import argparse
import json
import logging
from pathlib import Path

from neurokalman import drift_lab as dl
from neurokalman.config import load_config
from neurokalman.trainer import eval_worlds


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.ini")
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--kinds", nargs="+", default=list(dl.ABLATIONS), choices=list(dl.ABLATIONS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    worlds = eval_worlds(cfg)
    cache = {}
    for kind in args.kinds:
        table = dl.run_ablation(kind, cfg, args.seeds, worlds, progress=lambda r: print(json.dumps(r), flush=True),
                                cache=cache)
        table.write_csv(out / f"ablation_{kind}.csv")
        table.write_summary_csv(out / f"ablation_{kind}_summary.csv")
        (out / f"ablation_{kind}.md").write_text(table.render())
        print(table.render())


if __name__ == "__main__":
    main()

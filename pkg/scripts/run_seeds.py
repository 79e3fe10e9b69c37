"""Run the in-memory pipeline over several seeds and print a metrics table.

    python scripts/run_seeds.py configs/desk.ini --seeds 0 1 2 3 4
    python scripts/run_seeds.py configs/desk.ini --recalibrated --no-obfuscate
"""

import argparse

import numpy as np

from kinauth.config import load_config
from kinauth.experiment import run_experiment

COLUMNS = ("learned.raw.test_eer", "learned.zt.test_eer", "learned.raw.test_hter",
           "rawfeat.raw.test_eer", "seconds")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--recalibrated", action="store_true",
                    help="swap val/test devices after enrollment")
    ap.add_argument("--no-obfuscate", action="store_true")
    ap.add_argument("--no-baseline", action="store_true")
    args = ap.parse_args()

    rows = []
    print("seed," + ",".join(COLUMNS))
    for seed in args.seeds:
        cfg = load_config(args.config)
        cfg.seed = seed
        cfg.corpus.recalibrated = args.recalibrated
        res = run_experiment(cfg, baseline=not args.no_baseline,
                             obfuscate=False if args.no_obfuscate else None)
        s = res.summary()
        row = [s.get(c, float("nan")) for c in COLUMNS]
        rows.append(row)
        print(f"{seed}," + ",".join(f"{v:.4f}" for v in row), flush=True)
    print("mean," + ",".join(f"{v:.4f}" for v in np.nanmean(rows, axis=0)))


if __name__ == "__main__":
    main()

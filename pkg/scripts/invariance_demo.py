"""Print how far each cell family drifts when the input is shifted in time.

Zero-bias cells with a clean update schedule give the same output for every
shift of the first time step; the clockwork cell with fixed phases does not.
"""

import argparse

import numpy as np

from kinauth.cells import ClockworkConfig
from kinauth.evaluation import invariance_cell, invariance_trace


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bands", type=int, default=8)
    ap.add_argument("--base", type=int, default=2)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()

    cfg = ClockworkConfig.uniform(args.base, args.bands, 1)
    print("seed,rnn,cwrnn,dcwrnn")
    for seed in range(args.seeds):
        x = np.random.default_rng(1000 + seed).normal(size=args.steps)
        devs = [invariance_trace(f, x, cfg, invariance_cell(f, cfg, seed)).max_deviation
                for f in ("rnn", "cwrnn", "dcwrnn")]
        print(f"{seed}," + ",".join(f"{d:.3e}" for d in devs))


if __name__ == "__main__":
    main()

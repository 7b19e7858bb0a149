"""Gated patch-sequence cell versus the LSTM baseline on the same data and budget.

    python scripts/compare_temporal.py [--steps 100] [--dims 16]
"""
import argparse
import logging

import numpy as np

from segkan import experiment as ex
from segkan.config import RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--dims", type=int, default=16)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--no-skip", action="store_true",
                    help="decode from the recurrent state alone")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    print(f"{'cell':<6} {'seed':>4} {'final loss':>10} {'val dice':>9}")
    summary = {}
    for temporal in ("ptsn", "lstm"):
        scores = []
        for seed in args.seeds:
            cfg = RunConfig(dims=(args.dims,) * 3, steps=args.steps, n_train=8, n_val=4,
                            checkpoint_every=0, seed=seed, temporal=temporal,
                            skip_head=not args.no_skip, out_dir=f"runs/temporal/{temporal}_{seed}")
            res = ex.train(cfg)
            dice = float(np.mean(ex.evaluate(res.model, ex.build_split(cfg, "val"))))
            scores.append(dice)
            print(f"{temporal:<6} {seed:>4} {res.losses[-1]:>10.4f} {dice:>9.4f}")
        summary[temporal] = scores
    for k, v in summary.items():
        print(f"{k}: mean dice {np.mean(v):.4f} +- {np.std(v):.4f}")


if __name__ == "__main__":
    main()

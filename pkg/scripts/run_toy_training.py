"""Train on the default toy config, then compare held-out Dice to baselines.

    python scripts/run_toy_training.py [--config scripts/configs/default.cfg]
"""
import argparse
import logging
import time
from pathlib import Path

import numpy as np

from segkan import experiment as ex
from segkan.config import load_config

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "configs" / "default.cfg"))
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = load_config(args.config)
    val = ex.build_split(cfg, "val")
    untrained = float(np.mean(ex.evaluate(ex.build_model(cfg), val)))

    t0 = time.perf_counter()
    res = ex.train(cfg)
    minutes = (time.perf_counter() - t0) / 60

    dice = float(np.mean(ex.evaluate(res.model, val)))
    baseline = float(np.mean(ex.all_foreground_dice(val)))
    print(f"steps            {len(res.losses)} in {minutes:.2f} min ({res.mean_step_time:.3f} s/step)")
    if res.losses:
        print(f"loss             {res.losses[0]:.4f} -> {res.losses[-1]:.4f} "
              f"(ratio {res.losses[-1] / res.losses[0]:.3f})")
    print(f"held-out dice    {dice:.4f}")
    print(f"all-foreground   {baseline:.4f}  (margin {dice - baseline:+.4f})")
    print(f"untrained model  {untrained:.4f}")
    print(f"outputs in       {res.out_dir}")


if __name__ == "__main__":
    main()

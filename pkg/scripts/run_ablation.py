"""Patch-count ablation: Dice and per-step time for each P.

    python scripts/run_ablation.py [--config scripts/configs/ablate16.cfg]

Times are relative; the ratio column is step time over the smallest P.
"""
import argparse
import logging
from pathlib import Path

from segkan import experiment as ex
from segkan.config import load_config

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "configs" / "ablate16.cfg"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING, format="%(message)s")

    cfg = load_config(args.config)
    rows = ex.run_ablation(cfg)
    out = Path(cfg.out_dir)
    (out / "ablation.csv").write_text(ex.ablation_csv(rows), encoding="utf-8")

    t0 = rows[0].mean_step_time
    print(f"{'P':>4} {'dice':>8} {'s/step':>9} {'ratio':>6}")
    for r in rows:
        print(f"{r.patches:>4} {r.dice:>8.4f} {r.mean_step_time:>9.4f} {r.mean_step_time / t0:>5.2f}x")


if __name__ == "__main__":
    main()

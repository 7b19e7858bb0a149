"""Command-line entry points: train, eval, ablate, gradcheck."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .diffengine import ShapeError
from .gradcheck import run_suite

log = logging.getLogger("segkan")


def _fail(msg: str, code: int = 1) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _prepare_out(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_test"
    probe.write_text("")
    probe.unlink()
    return out


def cmd_train(config_path) -> int:
    try:
        cfg = load_config(config_path)
        out = _prepare_out(cfg)
        result = ex.train(cfg, out)
    except ConfigError as exc:
        return _fail(f"invalid config: {exc}", 2)
    except OSError as exc:
        return _fail(f"cannot write output: {exc}")
    except ex.TrainingError as exc:
        return _fail(str(exc))
    if result.losses:
        print(f"trained {len(result.losses)} steps: loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    else:
        print("trained 0 steps")
    print(f"metrics: {out / 'metrics.csv'}")
    print(f"checkpoint: {out / 'checkpoint_final.skc'}")
    return 0


def cmd_eval(ckpt_path, config_path) -> int:
    try:
        cfg = load_config(config_path)
        model = ex.load_model(ckpt_path, cfg)
        report = ex.run_eval(model, cfg)
        out = _prepare_out(cfg)
    except ConfigError as exc:
        return _fail(f"invalid config: {exc}", 2)
    except (ShapeError, CheckpointError, ValueError) as exc:
        return _fail(f"checkpoint does not match config: {exc}")
    except OSError as exc:
        return _fail(str(exc))
    for i, (d, b) in enumerate(zip(report.dice, report.baseline)):
        print(f"volume {i}: dice {d:.6f} (all-foreground {b:.6f})")
    print(f"mean dice {report.mean_dice:.6f} (all-foreground {report.mean_baseline:.6f})")
    (out / "eval.csv").write_text(report.to_csv(), encoding="utf-8")
    return 0


def cmd_ablate_patches(config_path) -> int:
    try:
        cfg = load_config(config_path)
        out = _prepare_out(cfg)
        rows = ex.run_ablation(cfg, out)
    except ConfigError as exc:
        return _fail(f"invalid config: {exc}", 2)
    except ex.AblationError as exc:
        return _fail(str(exc))
    except OSError as exc:
        return _fail(str(exc))
    table = ex.ablation_csv(rows)
    (out / "ablation.csv").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_gradcheck(seed: int = 0) -> int:
    rows = run_suite(seed)
    for name, err, tol, ok in rows:
        print(f"{name:<14} max_rel_err {err:.3e}  tol {tol:.0e}  {'PASS' if ok else 'FAIL'}")
    return 0 if all(r[3] for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segkan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p = sub.add_parser("ablate", help="patch-count ablation")
    p.add_argument("--config", required=True)
    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    if args.command == "train":
        return cmd_train(args.config)
    if args.command == "eval":
        return cmd_eval(args.ckpt, args.config)
    if args.command == "ablate":
        return cmd_ablate_patches(args.config)
    return cmd_gradcheck(args.seed)


if __name__ == "__main__":
    sys.exit(main())

"""Training, evaluation and patch-count ablation runs."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffengine as de
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .net import SegKanModel, binarize, dice_score, forward, segmentation_loss
from .optim import make_optimizer
from .synthdata import Volume, derive_seed, gen_tube_volume

log = logging.getLogger("segkan")

METRICS_HEADER = "step,loss,dice_train"
MODEL_STREAM = 1 << 32
BATCH_STREAM = MODEL_STREAM + 1


class TrainingError(RuntimeError):
    pass


class AblationError(RuntimeError):
    pass


def build_split(cfg: RunConfig, split: str) -> list:
    """Train volumes use stream indices [0, n_train); validation follows them."""
    if split == "train":
        indices = range(cfg.n_train)
    elif split == "val":
        indices = range(cfg.n_train, cfg.n_train + cfg.n_val)
    else:
        raise ValueError(f"unknown split {split!r}")
    return [gen_tube_volume(cfg.gen_config(derive_seed(cfg.seed, i))) for i in indices]


def stack_batch(volumes) -> tuple:
    x = np.stack([v.intensity for v in volumes]).astype(np.float64)
    y = np.stack([v.mask for v in volumes]).astype(np.float64)
    return x, y


def batch_order(n: int, batch: int, steps: int, seed: int) -> list:
    """Indices for each step, drawn from successive shuffled epochs."""
    rng = np.random.default_rng(seed)
    need = steps * batch
    pool = []
    while len(pool) < need:
        pool.extend(rng.permutation(n).tolist())
    return [pool[i * batch:(i + 1) * batch] for i in range(steps)]


def build_model(cfg: RunConfig, patches: int | None = None) -> SegKanModel:
    return SegKanModel(cfg.model_config(patches), tuple(cfg.dims),
                       seed=derive_seed(cfg.seed, MODEL_STREAM))


def model_state(model: SegKanModel) -> dict:
    return {k: p.data.copy() for k, p in model.parameters().items()}


@dataclass
class TrainResult:
    model: SegKanModel
    losses: list = field(default_factory=list)
    dices: list = field(default_factory=list)
    step_times: list = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def mean_step_time(self) -> float:
        """Mean wall time per step, excluding the first (warm-up) step."""
        times = self.step_times[1:] if len(self.step_times) > 1 else self.step_times
        return float(np.mean(times)) if times else 0.0


def _format_row(step: int, loss: float, dice: float) -> str:
    return f"{step},{loss:.17g},{dice:.17g}"


class Trainer:
    """One training run, advanced a step at a time.

    Stepping several trainers in turn gives each the same results as running
    them one after another, while spreading any drift in machine speed evenly
    over all of them.
    """

    def __init__(self, cfg: RunConfig, out_dir=None, patches: int | None = None,
                 train_set: list | None = None):
        self.cfg = cfg
        self.out = Path(out_dir if out_dir is not None else cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.volumes = train_set if train_set is not None else build_split(cfg, "train")
        self.model = build_model(cfg, patches)
        self.opt = make_optimizer(cfg.optimizer, self.model.parameters(), cfg.lr)
        self.config_text = (cfg if patches is None else cfg.replace(patches=patches)).to_text()
        self.order = batch_order(len(self.volumes), cfg.batch, cfg.steps,
                                 derive_seed(cfg.seed, BATCH_STREAM))
        self.result = TrainResult(self.model, out_dir=self.out)
        self.step_no = 0
        self._metrics = (self.out / "metrics.csv").open("w", encoding="utf-8", newline="\n")
        self._metrics.write(METRICS_HEADER + "\n")

    @property
    def done(self) -> bool:
        return self.step_no >= len(self.order)

    def step(self) -> None:
        step = self.step_no + 1
        t0 = time.perf_counter()
        x, y = stack_batch([self.volumes[i] for i in self.order[self.step_no]])
        self.opt.zero_grad()
        try:
            logits = forward(self.model, de.Array._wrap(x))
            loss = segmentation_loss(logits, y, self.cfg.bce_weight)
            de.backward(loss)
        except de.NonFiniteError as exc:
            self.close()
            raise TrainingError(f"non-finite value at step {step}: {exc}") from exc
        value = loss.item()
        if not np.isfinite(value):
            self.close()
            raise TrainingError(f"non-finite loss at step {step}")
        self.opt.step()
        self.result.step_times.append(time.perf_counter() - t0)
        self.step_no = step
        dice = dice_score(binarize(logits), y)
        self.result.losses.append(value)
        self.result.dices.append(dice)
        self._metrics.write(_format_row(step, value, dice) + "\n")
        if step == 1 or step % 10 == 0 or step == self.cfg.steps:
            log.info("step %d loss %.4f dice %.4f", step, value, dice)
        every = self.cfg.checkpoint_every
        if every and step % every == 0 and step != self.cfg.steps:
            save_checkpoint(self.out / f"checkpoint_{step:06d}.skc", model_state(self.model),
                            self.config_text)

    def close(self) -> None:
        if not self._metrics.closed:
            self._metrics.close()

    def finish(self) -> TrainResult:
        self.close()
        save_checkpoint(self.out / "checkpoint_final.skc", model_state(self.model), self.config_text)
        return self.result


def train(cfg: RunConfig, out_dir=None, patches: int | None = None,
          train_set: list | None = None) -> TrainResult:
    """Train from scratch; writes metrics.csv and checkpoints under ``out_dir``."""
    trainer = Trainer(cfg, out_dir, patches, train_set)
    while not trainer.done:
        trainer.step()
    return trainer.finish()


def predict(model: SegKanModel, volume: Volume) -> np.ndarray:
    with de.no_grad():
        logits = forward(model, de.Array._wrap(volume.intensity.astype(np.float64)))
    return binarize(logits)


def evaluate(model: SegKanModel, volumes) -> list:
    return [dice_score(predict(model, v), v.mask) for v in volumes]


def all_foreground_dice(volumes) -> list:
    return [dice_score(np.ones_like(v.mask), v.mask) for v in volumes]


def load_model(ckpt_path, cfg: RunConfig) -> SegKanModel:
    """Model shaped by ``cfg`` with weights from ``ckpt_path``."""
    arrays, _ = load_checkpoint(ckpt_path)
    model = build_model(cfg)
    model.load_state(arrays)
    return model


@dataclass
class EvalReport:
    seeds: list
    dice: list
    baseline: list

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else float("nan")

    @property
    def mean_baseline(self) -> float:
        return float(np.mean(self.baseline)) if self.baseline else float("nan")

    def to_csv(self) -> str:
        lines = ["volume,seed,dice,all_foreground_dice"]
        for i, (s, d, b) in enumerate(zip(self.seeds, self.dice, self.baseline)):
            lines.append(f"{i},{s},{d:.17g},{b:.17g}")
        lines.append(f"mean,,{self.mean_dice:.17g},{self.mean_baseline:.17g}")
        return "\n".join(lines) + "\n"


def run_eval(model: SegKanModel, cfg: RunConfig) -> EvalReport:
    volumes = build_split(cfg, "val")
    seeds = [v.meta["seed"] for v in volumes]
    return EvalReport(seeds, evaluate(model, volumes), all_foreground_dice(volumes))


@dataclass
class AblationRow:
    patches: int
    dice: float
    mean_step_time: float


def run_ablation(cfg: RunConfig, out_dir=None) -> list:
    """Train and evaluate each patch count with the same seed and budget.

    The runs advance in lockstep, one step each in turn, so the step times
    being compared are measured over the same stretch of wall-clock time.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    train_set = build_split(cfg, "train")
    val_set = build_split(cfg, "val")
    trainers = {}
    current = None
    try:
        for P in cfg.ablate_patches:
            current = P
            trainers[P] = Trainer(cfg, out / f"P{P}", patches=P, train_set=train_set)
        for _ in range(cfg.steps):
            for P, trainer in trainers.items():
                current = P
                trainer.step()
        rows = []
        for P, trainer in trainers.items():
            current = P
            res = trainer.finish()
            dice = float(np.mean(evaluate(res.model, val_set))) if val_set else float("nan")
            rows.append(AblationRow(P, dice, res.mean_step_time))
            log.info("P=%d dice %.4f step %.4fs", P, dice, res.mean_step_time)
    except Exception as exc:
        raise AblationError(f"ablation run with P={current} failed: {exc}") from exc
    finally:
        for trainer in trainers.values():
            trainer.close()
    return rows


def ablation_csv(rows) -> str:
    lines = ["P,dice,mean_step_time"]
    lines += [f"{r.patches},{r.dice:.6f},{r.mean_step_time:.6f}" for r in rows]
    return "\n".join(lines) + "\n"

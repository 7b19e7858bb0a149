"""Run configuration: flat ``key = value`` text files with ``#`` comments.

Keys and defaults::

    # model
    patches = 8              power of two; split over (x, y, z)
    channels = 8
    n_fkac = 2
    fourier_grid = 4
    reduction = 4
    h_dim = 64
    temporal = ptsn          ptsn | lstm
    skip_head = true
    # optimisation
    optimizer = adam         adam | sgd
    lr = 0.001
    steps = 200
    batch = 2
    bce_weight = 0.5
    checkpoint_every = 50    0 disables periodic checkpoints
    # data
    dims = 32,32,32
    n_curves = 3
    r_min = 1.5
    r_max = 2.5
    noise_sigma = 0.1
    fg_intensity = 0.8
    bg_intensity = 0.2
    n_train = 20
    n_val = 5
    # run
    seed = 0                 overridden by $SEGKAN_SEED
    out_dir = runs/default
    ablate_patches = 8,16,32
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .net import ModelConfig
from .synthdata import GenConfig

SEED_ENV = "SEGKAN_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    patches: int = 8
    channels: int = 8
    n_fkac: int = 2
    fourier_grid: int = 4
    reduction: int = 4
    h_dim: int = 64
    temporal: str = "ptsn"
    skip_head: bool = True
    optimizer: str = "adam"
    lr: float = 1e-3
    steps: int = 200
    batch: int = 2
    bce_weight: float = 0.5
    checkpoint_every: int = 50
    dims: tuple = (32, 32, 32)
    n_curves: int = 3
    r_min: float = 1.5
    r_max: float = 2.5
    noise_sigma: float = 0.1
    fg_intensity: float = 0.8
    bg_intensity: float = 0.2
    n_train: int = 20
    n_val: int = 5
    seed: int = 0
    out_dir: str = "runs/default"
    ablate_patches: tuple = (8, 16, 32)

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.temporal not in ("ptsn", "lstm"):
            raise ConfigError(f"temporal must be ptsn or lstm, got {self.temporal!r}")
        if self.steps < 0 or self.batch < 1 or self.n_train < 1 or self.n_val < 0:
            raise ConfigError("steps >= 0, batch >= 1, n_train >= 1 and n_val >= 0 are required")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def model_config(self, patches: int | None = None) -> ModelConfig:
        return ModelConfig(
            patches=self.patches if patches is None else patches,
            channels=self.channels, n_fkac=self.n_fkac,
            fourier_grid=self.fourier_grid, reduction=self.reduction,
            h_dim=self.h_dim, temporal=self.temporal, skip_head=self.skip_head)

    def gen_config(self, seed: int) -> GenConfig:
        return GenConfig(dims=tuple(self.dims), n_curves=self.n_curves, r_min=self.r_min,
                         r_max=self.r_max, noise_sigma=self.noise_sigma,
                         fg_intensity=self.fg_intensity, bg_intensity=self.bg_intensity,
                         seed=seed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            else:
                value = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)


_BOOLS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _convert(name: str, default, raw: str):
    try:
        if isinstance(default, bool):
            return _BOOLS[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from None
    return raw


def parse_config(text: str, env: dict | None = None) -> RunConfig:
    """Parse config text; unknown keys and duplicates are errors."""
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, getattr(defaults, key), raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = _convert("seed", 0, env[SEED_ENV])
    return RunConfig(**values)


def load_config(path, env: dict | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), env)

"""Segmentation model: patchify, FKAC embedding, recurrent patch sequence, decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import Array
from .kan import FkacBlock, fkac_forward
from .ptsn import LstmParams, PtsnParams, lstm_cell, ptsn_cell, run_sequence


# ---------------------------------------------------------------- patches

def factor_patch_count(P: int) -> tuple:
    """Split a power-of-two patch count over (x, y, z), most balanced first."""
    if not isinstance(P, (int, np.integer)) or P < 1 or P & (P - 1):
        raise ValueError(f"patch count must be a positive power of two, got {P}")
    counts = [1, 1, 1]
    while counts[0] * counts[1] * counts[2] < P:
        smallest = min(counts)
        for axis in (2, 1, 0):  # ties: z, then y, then x
            if counts[axis] == smallest:
                counts[axis] *= 2
                break
    return tuple(counts)


@dataclass(frozen=True)
class PatchGrid:
    counts: tuple
    extents: tuple

    @classmethod
    def for_volume(cls, shape, P: int) -> "PatchGrid":
        counts = factor_patch_count(P)
        for n, g in zip(shape, counts):
            if n % g:
                raise ValueError(f"volume shape {tuple(shape)} not divisible by patch grid {counts}")
        return cls(counts, tuple(n // g for n, g in zip(shape, counts)))

    @property
    def n_patches(self) -> int:
        return int(np.prod(self.counts))

    @property
    def volume_shape(self) -> tuple:
        return tuple(g * p for g, p in zip(self.counts, self.extents))

    @property
    def patch_voxels(self) -> int:
        return int(np.prod(self.extents))


def _check_grid(shape, grid: PatchGrid):
    for n, g in zip(shape, grid.counts):
        if n % g:
            raise ValueError(f"extents {tuple(shape)} not divisible by counts {grid.counts}")
    if tuple(shape) != grid.volume_shape:
        raise de.ShapeError(f"volume shape {tuple(shape)} does not match grid {grid.volume_shape}")


def to_patches(volume: Array, grid: PatchGrid) -> Array:
    """[B, X, Y, Z] -> [B, P, px, py, pz], patches in raster order (z fastest)."""
    b = volume.shape[0]
    _check_grid(volume.shape[1:], grid)
    (gx, gy, gz), (px, py, pz) = grid.counts, grid.extents
    v = de.reshape(volume, (b, gx, px, gy, py, gz, pz))
    v = de.transpose(v, (0, 1, 3, 5, 2, 4, 6))
    return de.reshape(v, (b, grid.n_patches, px, py, pz))


def from_patches(patches: Array, grid: PatchGrid) -> Array:
    """Inverse of ``to_patches``."""
    b = patches.shape[0]
    (gx, gy, gz), (px, py, pz) = grid.counts, grid.extents
    v = de.reshape(patches, (b, gx, gy, gz, px, py, pz))
    v = de.transpose(v, (0, 1, 4, 2, 5, 3, 6))
    return de.reshape(v, (b,) + grid.volume_shape)


def patchify(volume, grid: PatchGrid) -> list:
    volume = de.as_array(volume)
    stacked = to_patches(de.reshape(volume, (1,) + volume.shape), grid)
    return [stacked[0, i] for i in range(grid.n_patches)]


def unpatchify(patches, grid: PatchGrid) -> Array:
    stacked = de.stack([de.as_array(p) for p in patches], axis=0)
    stacked = de.reshape(stacked, (1,) + stacked.shape)
    out = from_patches(stacked, grid)
    return de.reshape(out, grid.volume_shape)


# ---------------------------------------------------------------- model

@dataclass
class ModelConfig:
    patches: int = 8
    channels: int = 8
    n_fkac: int = 2
    fourier_grid: int = 4
    reduction: int = 4
    h_dim: int = 64
    temporal: str = "ptsn"      # ptsn | lstm
    skip_head: bool = True


def _param(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Array(rng.uniform(-bound, bound, shape), requires_grad=True)


class SegKanModel:
    """One logit per voxel of a volume tiled into a patch sequence."""

    def __init__(self, cfg: ModelConfig, volume_shape, seed: int = 0):
        if cfg.temporal not in ("ptsn", "lstm"):
            raise ValueError(f"unknown temporal cell {cfg.temporal!r}")
        self.cfg = cfg
        self.grid = PatchGrid.for_volume(volume_shape, cfg.patches)
        if any(e % 2 for e in self.grid.extents):
            raise ValueError(f"patch extents {self.grid.extents} must be even for the stride-2 downsampler")
        rng = np.random.default_rng(seed)
        C = cfg.channels
        self.lift_w = _param(rng, 1, (C, 1, 1, 1, 1))
        self.lift_b = _param(rng, 1, (C,))
        self.blocks = [FkacBlock(C, cfg.reduction, cfg.fourier_grid, rng=rng)
                       for _ in range(cfg.n_fkac)]
        self.down_w = _param(rng, 8 * C, (C, C, 2, 2, 2))
        self.down_b = _param(rng, 8 * C, (C,))
        feat = C * self.grid.patch_voxels // 8
        self.proj_w = _param(rng, feat, (cfg.h_dim, feat))
        self.proj_b = _param(rng, feat, (cfg.h_dim,))
        if cfg.temporal == "ptsn":
            self.core = PtsnParams.init(cfg.h_dim, cfg.h_dim, rng)
            self.cell = ptsn_cell
        else:
            self.core = LstmParams.init(cfg.h_dim, cfg.h_dim, rng)
            self.cell = lstm_cell
        vox = self.grid.patch_voxels
        self.dec_w = _param(rng, cfg.h_dim, (vox, cfg.h_dim))
        self.dec_b = _param(rng, cfg.h_dim, (vox,))
        if cfg.skip_head:
            self.skip_w = _param(rng, C, (1, C, 1, 1, 1))
            self.skip_b = _param(rng, C, (1,))

    def parameters(self) -> dict:
        params = {"embed.lift_w": self.lift_w, "embed.lift_b": self.lift_b}
        for i, block in enumerate(self.blocks):
            for k, v in block.parameters().items():
                params[f"embed.fkac{i}.{k}"] = v
        params.update({
            "embed.down_w": self.down_w, "embed.down_b": self.down_b,
            "embed.proj_w": self.proj_w, "embed.proj_b": self.proj_b,
        })
        for k, v in self.core.parameters().items():
            params[f"core.{k}"] = v
        params.update({"decoder.w": self.dec_w, "decoder.b": self.dec_b})
        if self.cfg.skip_head:
            params.update({"decoder.skip_w": self.skip_w, "decoder.skip_b": self.skip_b})
        return params

    def load_state(self, state: dict) -> None:
        """Copy arrays from ``state`` into the parameters, checking shapes."""
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise de.ShapeError(
                    f"parameter {name!r}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data[...] = value

    def __call__(self, volume) -> Array:
        return forward(self, volume)


def forward(model: SegKanModel, volume) -> Array:
    """Logits with the same shape as ``volume`` ([X,Y,Z] or batched [B,X,Y,Z])."""
    volume = de.as_array(volume)
    single = volume.ndim == 3
    if single:
        volume = de.reshape(volume, (1,) + volume.shape)
    if volume.ndim != 4:
        raise de.ShapeError(f"expected a [X,Y,Z] or [B,X,Y,Z] volume, got {volume.shape}")
    if tuple(volume.shape[1:]) != model.grid.volume_shape:
        raise de.ShapeError(f"volume shape {volume.shape[1:]} != configured {model.grid.volume_shape}")
    grid, cfg = model.grid, model.cfg
    B, P = volume.shape[0], grid.n_patches
    px, py, pz = grid.extents

    x = de.reshape(to_patches(volume, grid), (B * P, 1, px, py, pz))
    x = de.conv3d(x, model.lift_w, bias=model.lift_b)
    for block in model.blocks:
        x = fkac_forward(block, x)
    feat = de.conv3d(x, model.down_w, stride=2, bias=model.down_b)
    feat = de.reshape(feat, (B * P, -1))
    emb = de.add(de.matmul(feat, de.transpose(model.proj_w)),
                 de.expand(model.proj_b, (B * P, cfg.h_dim)))
    emb = de.reshape(emb, (B, P, cfg.h_dim))

    hs, _ = run_sequence(model.cell, [emb[:, t, :] for t in range(P)], model.core)
    hid = de.reshape(de.stack(hs, axis=1), (B * P, cfg.h_dim))
    vox = grid.patch_voxels
    logits = de.add(de.matmul(hid, de.transpose(model.dec_w)),
                    de.expand(model.dec_b, (B * P, vox)))
    if cfg.skip_head:
        skip = de.conv3d(x, model.skip_w, bias=model.skip_b)
        logits = de.add(logits, de.reshape(skip, (B * P, vox)))
    out = from_patches(de.reshape(logits, (B, P, px, py, pz)), grid)
    return de.reshape(out, out.shape[1:]) if single else out


# ---------------------------------------------------------------- losses and metrics

def _binary(t: np.ndarray, what: str) -> None:
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError(f"{what} must be binary")


def soft_dice_loss(probs: Array, target, eps: float = 1.0) -> Array:
    """1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)."""
    probs = de.as_array(probs)
    t = np.asarray(target.data if isinstance(target, Array) else target, dtype=np.float64)
    if t.shape != probs.shape:
        raise de.ShapeError(f"probs {probs.shape} and target {t.shape} differ")
    _binary(t, "target")
    t = Array._wrap(t)
    inter = de.reduce(de.mul(probs, t), "sum")
    num = de.add(de.mul(inter, 2.0), eps)
    den = de.add(de.add(de.reduce(probs, "sum"), float(t.data.sum())), eps)
    return de.sub(1.0, de.div(num, den))


def bce_with_logits(logits: Array, target) -> Array:
    """Mean binary cross-entropy, softplus(z) - t z."""
    logits = de.as_array(logits)
    t = Array._wrap(np.asarray(target, dtype=np.float64))
    if t.shape != logits.shape:
        raise de.ShapeError(f"logits {logits.shape} and target {t.shape} differ")
    return de.reduce(de.sub(de.softplus(logits), de.mul(t, logits)), "mean")


def segmentation_loss(logits: Array, target, bce_weight: float = 0.5) -> Array:
    """Per-volume soft Dice (averaged over the batch) plus weighted BCE."""
    target = np.asarray(target, dtype=np.float64)
    probs = de.sigmoid(logits)
    if logits.ndim == 4:
        dice = [soft_dice_loss(probs[i], target[i]) for i in range(logits.shape[0])]
        loss = de.mul(de.reduce(de.stack(dice), "sum"), 1.0 / len(dice))
    else:
        loss = soft_dice_loss(probs, target)
    if bce_weight:
        loss = de.add(loss, de.mul(bce_with_logits(logits, target), float(bce_weight)))
    return loss


def dice_score(pred, target) -> float:
    p = np.asarray(pred.data if isinstance(pred, Array) else pred)
    t = np.asarray(target.data if isinstance(target, Array) else target)
    if p.shape != t.shape:
        raise de.ShapeError(f"pred {p.shape} and target {t.shape} differ")
    _binary(p, "pred")
    _binary(t, "target")
    p, t = p.astype(bool), t.astype(bool)
    total = p.sum() + t.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / total)


def binarize(logits, threshold: float = 0.5) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Array) else logits)
    return (0.5 * (1.0 + np.tanh(0.5 * z)) > threshold).astype(np.uint8)

"""Tubular phantom volumes and the SKV1 volume file format.

Randomness comes from a counter-based SplitMix64 stream so the same seed
gives the same bytes on every platform:

    state_n = seed + n * 0x9E3779B97F4A7C15            (mod 2**64)
    z = state_n
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out_n = z ^ (z >> 31)

Uniforms are ``(out >> 11) * 2**-53``; normals use the cosine branch of
Box-Muller on consecutive uniform pairs ``(u1, u2)`` with ``1 - u1`` as the
radius argument.

SKV1 layout (little-endian)::

    0..3   b"SKV1"
    4      intensity dtype: 0 = float32, 1 = uint8
    5..7   reserved, zero
    8..19  extents X, Y, Z as uint32
    20..   intensity payload (row-major), then uint8 mask payload
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1


def splitmix64_mix(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based SplitMix64; ``n`` draws advance the state by ``n * GAMMA``."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GAMMA)
        self.state = (self.state + n * GAMMA) & MASK64
        return splitmix64_mix(states)

    def uniform(self, n: int = 1) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal(self, n: int = 1) -> np.ndarray:
        u = self.uniform(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log(1.0 - u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def randint(self, low: int, high: int) -> int:
        return low + int(self.uniform(1)[0] * (high - low))


def derive_seed(seed: int, index: int) -> int:
    """The ``index``-th output of a SplitMix64 stream seeded with ``seed``."""
    with np.errstate(over="ignore"):
        state = np.uint64(int(seed) & MASK64) + np.uint64((index + 1) * GAMMA & MASK64)
    return int(splitmix64_mix(np.array([state]))[0])


@dataclass
class GenConfig:
    dims: tuple = (32, 32, 32)
    n_curves: int = 3
    r_min: float = 1.5
    r_max: float = 2.5
    noise_sigma: float = 0.1
    fg_intensity: float = 0.8
    bg_intensity: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive extents, got {self.dims}")
        if self.n_curves < 1:
            raise ValueError("n_curves must be >= 1")
        if not 0 < self.r_min <= self.r_max < min(self.dims) / 4:
            raise ValueError(f"need 0 < r_min <= r_max < min(dims)/4, got [{self.r_min}, {self.r_max}]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Volume:
    intensity: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.intensity.shape != self.mask.shape:
            raise ValueError("intensity and mask shapes differ")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary")
        if not np.isfinite(self.intensity.astype(np.float64)).all():
            raise ValueError("intensity must be finite")

    @property
    def shape(self) -> tuple:
        return self.intensity.shape


def bezier(ctrl: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Points of a cubic Bezier curve; ``ctrl`` is [4, 3]."""
    t = t[:, None]
    s = 1.0 - t
    return (s ** 3 * ctrl[0] + 3 * s ** 2 * t * ctrl[1]
            + 3 * s * t ** 2 * ctrl[2] + t ** 3 * ctrl[3])


def _curve_controls(rng: SplitMix64, dims, radius: float) -> np.ndarray:
    axis = rng.randint(0, 3)
    hi = np.array(dims, dtype=np.float64) - 1.0
    u = rng.uniform(12).reshape(4, 3)
    ctrl = u * hi
    # keep the endpoints' cross-section inside the volume
    margin = np.minimum(radius, hi / 2)
    for end in (0, 3):
        ctrl[end] = margin + u[end] * (hi - 2 * margin)
    ctrl[0, axis] = 0.0
    ctrl[3, axis] = hi[axis]
    return ctrl


def _rasterize_tube(points: np.ndarray, radius: float, dims) -> np.ndarray:
    """Union of balls of ``radius`` around ``points`` (voxel centres on integers)."""
    mask = np.zeros(dims, dtype=bool)
    upper = np.array(dims) - 1
    for chunk in np.array_split(points, max(1, len(points) // 16)):
        lo = np.clip(np.floor(chunk.min(axis=0) - radius), 0, upper).astype(int)
        hi = np.clip(np.ceil(chunk.max(axis=0) + radius), 0, upper).astype(int)
        axes = [np.arange(a, b + 1, dtype=np.float64) for a, b in zip(lo, hi)]
        sub = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        d2 = ((sub[None] - chunk[:, None, None, None, :]) ** 2).sum(axis=-1).min(axis=0)
        region = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
        mask[region] |= d2 <= radius * radius
    return mask


def gen_tube_volume(cfg: GenConfig) -> Volume:
    cfg.validate()
    dims = tuple(int(n) for n in cfg.dims)
    rng = SplitMix64(cfg.seed)
    mask = np.zeros(dims, dtype=bool)
    curves = []
    for _ in range(cfg.n_curves):
        radius = cfg.r_min + rng.uniform(1)[0] * (cfg.r_max - cfg.r_min)
        ctrl = _curve_controls(rng, dims, radius)
        polygon = np.linalg.norm(np.diff(ctrl, axis=0), axis=1).sum()
        n_samples = max(8, int(math.ceil(4.0 * polygon)))
        pts = bezier(ctrl, np.linspace(0.0, 1.0, n_samples))
        mask |= _rasterize_tube(pts, radius, dims)
        curves.append({"controls": ctrl.tolist(), "radius": radius})
    m = mask.astype(np.float64)
    intensity = cfg.bg_intensity + (cfg.fg_intensity - cfg.bg_intensity) * m
    if cfg.noise_sigma > 0:
        intensity = intensity + cfg.noise_sigma * rng.normal(m.size).reshape(dims)
    intensity = np.clip(intensity, 0.0, 1.0).astype(np.float32)
    meta = {"seed": cfg.seed, "config": asdict(cfg), "curves": curves}
    return Volume(intensity, mask.astype(np.uint8), meta)


# ---------------------------------------------------------------- SKV1 file format

MAGIC = b"SKV1"
_HEADER = struct.Struct("<4sB3sIII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
MAX_VOXELS = 2 ** 31 - 1


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass


class DimensionOverflowError(VolumeFormatError):
    pass


def _voxel_count(extents) -> int:
    if any(n < 1 or n > 0xFFFFFFFF for n in extents):
        raise DimensionOverflowError(f"extents {tuple(extents)} outside [1, 2**32)")
    count = int(np.prod([int(n) for n in extents], dtype=object))
    if count > MAX_VOXELS:
        raise DimensionOverflowError(f"{count} voxels exceeds the {MAX_VOXELS} limit")
    return count


def write_volume(v: Volume, path) -> None:
    if v.intensity.ndim != 3:
        raise ValueError("volume must be 3-D")
    _voxel_count(v.shape)
    if v.intensity.dtype == np.uint8:
        code = 1
    elif v.intensity.dtype == np.float32:
        code = 0
    else:
        raise VolumeFormatError(f"unsupported intensity dtype {v.intensity.dtype}; use float32 or uint8")
    header = _HEADER.pack(MAGIC, code, b"\0\0\0", *v.shape)
    payload = np.ascontiguousarray(v.intensity, dtype=_DTYPES[code]).tobytes()
    mask = np.ascontiguousarray(v.mask, dtype=np.uint8).tobytes()
    Path(path).write_bytes(header + payload + mask)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, code, reserved, *extents = _HEADER.unpack_from(raw)
    if code not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    if reserved != b"\0\0\0":
        raise VolumeFormatError(f"{path}: reserved header bytes are not zero")
    n = _voxel_count(extents)
    dt = _DTYPES[code]
    need = _HEADER.size + n * dt.itemsize + n
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - _HEADER.size} bytes, expected {need - _HEADER.size}")
    if len(raw) > need:
        raise VolumeFormatError(f"{path}: {len(raw) - need} trailing bytes")
    off = _HEADER.size
    intensity = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(extents)
    mask = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + n * dt.itemsize).reshape(extents)
    if code == 0:
        intensity = intensity.astype(np.float32)
    return Volume(intensity.copy(), mask.copy(), {})

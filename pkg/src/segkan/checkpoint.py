"""SKC1 checkpoints: named float64 arrays plus the run config.

Layout (little-endian)::

    b"SKC1", version u16
    config length u32, config UTF-8 ``key = value`` text
    repeated until EOF:
        name length u16, name UTF-8, rank u8, extents u32 * rank,
        float64 payload (row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SKC1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: dict, config_text: str = "") -> bytes:
    cfg = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg]
    for name, value in arrays.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f8", order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"record {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(raw: bytes) -> tuple:
    """Returns ``(arrays, config_text)``."""
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    try:
        version, cfg_len = struct.unpack_from("<HI", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        if len(raw) < pos + cfg_len:
            raise CheckpointError("config block truncated")
        config_text = raw[pos:pos + cfg_len].decode("utf-8")
        pos += cfg_len
        arrays = {}
        while pos < len(raw):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{rank}I", raw, pos + 1)
            pos += 1 + 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(raw):
                raise CheckpointError(f"record {name!r} truncated")
            if name in arrays:
                raise CheckpointError(f"duplicate record {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return arrays, config_text


def save_checkpoint(path, arrays: dict, config_text: str = "") -> None:
    Path(path).write_bytes(encode(arrays, config_text))


def load_checkpoint(path) -> tuple:
    return decode(Path(path).read_bytes())

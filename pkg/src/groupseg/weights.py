"""Flat binary weight container with a JSON manifest mirror.

Layout: magic b"NSVT", version u32, then per tensor: name length u32,
utf-8 name, rank u32, dims u32 each, raw float64 values.  All integers
little-endian; values little-endian IEEE doubles.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

MAGIC = b"NSVT"
VERSION = 1


def save_weights(path: str, named: list[tuple[str, Tensor]]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, t in named:
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            shape = t.data.shape
            f.write(struct.pack("<I", len(shape)))
            for d in shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    manifest = {name: list(t.data.shape) for name, t in named}
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def read_weights(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ConfigError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out


def load_weights(path: str, named: list[tuple[str, Tensor]]) -> None:
    """Load values into existing tensors; names and shapes must match exactly."""
    stored = read_weights(path)
    for name, t in named:
        if name not in stored:
            raise ConfigError(f"{path}: missing tensor {name!r}")
        arr = stored.pop(name)
        if arr.shape != t.data.shape:
            raise ConfigError(
                f"{path}: shape mismatch for {name!r}: {arr.shape} vs {t.data.shape}")
        t.data = arr.copy()
    if stored:
        raise ConfigError(f"{path}: unexpected tensors {sorted(stored)[:5]}")

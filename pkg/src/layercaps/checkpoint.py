"""Binary checkpoint format.

Layout: the magic ``b"LCAP1\\n"`` followed by one record per parameter, sorted by
name. A record is ``u32 name_len | utf-8 name | u32 rank | u32 dims[rank] |
f64 values[prod(dims)]``, all little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LCAP1\n"


class CheckpointError(ValueError):
    pass


def encode(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name in sorted(params):
        arr = np.array(params[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("missing LCAP1 magic")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        if name in out:
            raise CheckpointError(f"duplicate parameter {name!r}")
        out[name] = values.reshape(dims)
    return out


def save(path, module) -> None:
    params = {name: p.data for name, p in module.named_parameters().items()}
    Path(path).write_bytes(encode(params))


def load(path, module) -> None:
    """Copy stored values into ``module``'s parameters; names and shapes must match."""
    stored = decode(Path(path).read_bytes())
    own = module.named_parameters()
    missing = sorted(set(own) - set(stored))
    extra = sorted(set(stored) - set(own))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={extra}")
    for name, p in own.items():
        if stored[name].shape != p.shape:
            raise CheckpointError(f"{name}: stored shape {stored[name].shape} != {p.shape}")
        p.data = stored[name].copy()

"""Binary parameter checkpoints.

Layout (all integers little-endian u32)::

    b"CCCP" | version | entry count
    per entry: name length | UTF-8 name | rank | extents... | float32 data (LE, row-major)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .params import ModelParams

MAGIC = b"CCCP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(entries: Iterable[tuple[str, np.ndarray]]) -> bytes:
    entries = list(entries)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        piece = blob[pos : pos + n]
        pos += n
        return piece

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last entry")
    return out


def write_checkpoint(path: str | os.PathLike, entries: Iterable[tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(entries))


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def save_params(path: str | os.PathLike, params: ModelParams) -> None:
    write_checkpoint(path, ((name, t.data) for name, t in params))


def load_params(path: str | os.PathLike, params: ModelParams) -> ModelParams:
    params.load_state(read_checkpoint(path))
    return params

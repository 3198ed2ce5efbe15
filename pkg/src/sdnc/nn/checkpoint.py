"""Binary parameter checkpoints.

Layout (all little-endian)::

    b"SDNCCKPT" | u32 version | u32 meta_len | meta JSON (utf-8) | u32 count
    count x ( u16 name_len | name | u8 ndim | ndim x u32 dim | float32 data )
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDNCCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw = name.encode()
            arr = np.asarray(arr)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8

    def read(fmt: str):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        version, meta_len = read("<II")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(data[pos : pos + meta_len])
        pos += meta_len
        (count,) = read("<I")
        state = {}
        for _ in range(count):
            (nlen,) = read("<H")
            name = data[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = read("<B")
            shape = read(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            state[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return state, meta

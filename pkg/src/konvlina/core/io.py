"""KVLN binary tensor container and named-tensor checkpoints.

Tensor record (all little-endian)::

    b"KVLN" | version u16 | dtype u8 (0 f64, 1 f32) | ndim u8 | dims u64 * ndim | payload

Checkpoint file::

    b"KVLC" | version u16 | count u32 | count * (name_len u16 | utf-8 name | tensor record)

Entries are written in sorted name order so identical state gives identical
bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"KVLN"
CKPT_MAGIC = b"KVLC"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}


class FormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, arr, dtype: str = "f64") -> None:
    code = {"f64": 0, "f32": 1}[dtype]
    # ascontiguousarray would promote 0-d arrays to 1-d.
    a = np.array(arr, dtype=_DTYPES[code], order="C")
    f.write(MAGIC)
    f.write(struct.pack("<HBB", VERSION, code, a.ndim))
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(a.tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("truncated KVLN stream")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != MAGIC:
        raise FormatError("bad magic, not a KVLN tensor")
    version, code, ndim = struct.unpack("<HBB", _read_exact(f, 4))
    if version != VERSION:
        raise FormatError(f"unsupported KVLN version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt)
    return data.reshape(dims).astype(np.float64)


def save_tensor(path, arr, dtype: str = "f64") -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr, dtype)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", VERSION, len(tensors)))
        for name in sorted(tensors):
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            write_tensor(f, tensors[name])


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CKPT_MAGIC:
            raise FormatError("bad magic, not a KVLN checkpoint")
        version, count = struct.unpack("<HI", _read_exact(f, 6))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, n).decode()
            out[name] = read_tensor(f)
        return out

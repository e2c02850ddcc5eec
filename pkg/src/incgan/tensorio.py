"""Binary tensor files.

Layout (little-endian): magic ``ILTF``, u32 version (1), u8 dtype code
(1 = float32), u8 rank, one u32 per dimension, then the row-major payload.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ILTF"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4")}
_HEADER = struct.Struct("<4sIBB")


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")  # ascontiguousarray would turn 0-d into 1-d
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return _HEADER.pack(MAGIC, VERSION, 1, arr.ndim) + dims + arr.tobytes()


def decode(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError(f"{source}: truncated header at offset {len(blob)}")
    magic, version, code, rank = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset 4")
    if code not in DTYPE_CODES:
        raise FormatError(f"{source}: unknown dtype code {code} at offset 8")
    offset = _HEADER.size
    if len(blob) < offset + 4 * rank:
        raise FormatError(f"{source}: truncated shape at offset {len(blob)}")
    shape = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = len(blob) - offset
    if payload != expected:
        problem = "truncated payload" if payload < expected else "trailing bytes after payload"
        raise FormatError(
            f"{source}: {problem} at offset {offset}: {payload} bytes, expected {expected} for shape {shape}"
        )
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape).astype(np.float32)


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes(), source=str(path))

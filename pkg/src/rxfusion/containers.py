"""RXT1 tensor file format.

Layout, all little-endian:

    bytes 0-3   magic b"RXT1"
    byte  4     dtype code (0 = float64)
    byte  5     rank
    then        rank * u32 extents
    then        row-major payload

A deliberately tiny container: one tensor per file, float64 only for
now, so checkpoints and dataset frames round-trip exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"RXT1"
DTYPE_F64 = 0

_DTYPES = {DTYPE_F64: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed or unsupported container bytes."""


def _prepare(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray would promote rank 0 to rank 1; convert only when needed
    arr = np.asarray(arr, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def write_rxt(path: Union[str, Path], arr: np.ndarray) -> None:
    arr = _prepare(arr)
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} exceeds container limit")
    header = MAGIC + struct.pack("<BB", DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.astype("<f8", copy=False).tobytes())


def read_rxt(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    return loads_rxt(blob)


def dumps_rxt(arr: np.ndarray) -> bytes:
    arr = _prepare(arr)
    header = MAGIC + struct.pack("<BB", DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8", copy=False).tobytes()


def loads_rxt(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    dtype_code, rank = struct.unpack_from("<BB", blob, 4)
    if dtype_code not in _DTYPES:
        raise FormatError(f"unknown dtype code {dtype_code}")
    shape = struct.unpack_from(f"<{rank}I", blob, 6)
    offset = 6 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    expected = offset + count * 8
    if len(blob) != expected:
        raise FormatError(f"payload size {len(blob)} bytes, expected {expected}")
    arr = np.frombuffer(blob, dtype=_DTYPES[dtype_code], count=count, offset=offset)
    return arr.reshape(shape).astype(np.float64)

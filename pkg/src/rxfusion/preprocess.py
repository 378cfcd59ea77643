"""Doppler-axis compression, noise filtering, and the sparse codec.

The 4D tesseract collapses to a 3-channel spherical cube: per (r, e, a)
cell, channel 0 is the mean power over Doppler, channel 1 the mean
squared deviation from that mean, channel 2 the Doppler value at the
power argmax (ties resolve to the lowest bin). Filtering then keeps a
sparse subset of cells, stored either in memory or as RXS1 files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .simulate import SpectrumTesseract


class FilterError(ValueError):
    """Filter parameters incompatible with the cube's extents."""


class SparseError(ValueError):
    """Invalid sparse structure (duplicate or out-of-range indices)."""


@dataclass
class RadarCube3:
    """(R, E, A, 3) cube: mean power, power variance, peak-Doppler value."""

    values: np.ndarray
    range_m: np.ndarray
    elevation_rad: np.ndarray
    azimuth_rad: np.ndarray

    @property
    def dense_shape(self) -> Tuple[int, int, int]:
        return self.values.shape[:3]

    def mean_power(self) -> np.ndarray:
        return self.values[..., 0]


def compress_doppler(spec: SpectrumTesseract) -> RadarCube3:
    """Collapse the Doppler axis into (mean, variance, peak-Doppler)."""
    power = spec.power
    if power.shape[0] < 2:
        raise FilterError("need at least 2 Doppler bins to compress")
    mean = power.mean(axis=0)
    var = ((power - mean) ** 2).mean(axis=0)
    peak = spec.doppler_mps[np.argmax(power, axis=0)]
    values = np.stack([mean, var, peak], axis=-1)
    return RadarCube3(
        values=values,
        range_m=spec.range_m,
        elevation_rad=spec.elevation_rad,
        azimuth_rad=spec.azimuth_rad,
    )


@dataclass
class SparseSpectrum:
    """Kept cells of a filtered cube: integer (r, e, a) indices + 3 values."""

    indices: np.ndarray  # (N, 3) int
    values: np.ndarray  # (N, 3) float64
    dense_shape: Tuple[int, int, int]

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, 3)
        if len(self.indices) != len(self.values):
            raise SparseError("indices and values lengths differ")
        shape = np.asarray(self.dense_shape, dtype=np.int64)
        if len(self.indices) and (
            np.any(self.indices < 0) or np.any(self.indices >= shape)
        ):
            raise SparseError("indices outside dense_shape")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def retention(self) -> float:
        return len(self) / float(np.prod(self.dense_shape))


def sparse_from_mask(cube: RadarCube3, keep: np.ndarray) -> SparseSpectrum:
    """Collect kept cells in row-major index order."""
    idx = np.argwhere(keep)
    vals = cube.values[keep]
    return SparseSpectrum(indices=idx, values=vals, dense_shape=cube.dense_shape)


def range_filter(cube: RadarCube3, alpha: float = 0.15) -> SparseSpectrum:
    """Keep cells whose mean power reaches alpha times their range slice's max.

    Each range bin is thresholded independently: within the (E, A) slice
    at range r, cells with M >= alpha * max(M over the slice) survive.
    """
    if not 0.0 < alpha < 1.0:
        raise FilterError(f"alpha must be in (0, 1), got {alpha}")
    m = cube.mean_power()
    slice_max = m.max(axis=(1, 2), keepdims=True)
    keep = m >= alpha * slice_max
    return sparse_from_mask(cube, keep)


def ca_cfar(
    cube: RadarCube3, guard: int = 2, train: int = 8, scale: float = 3.0
) -> SparseSpectrum:
    """Cell-averaging CFAR along azimuth, independently per (r, e) row.

    The noise estimate for a cell is the mean over up to `train` cells on
    each side beyond a `guard`-cell gap; edge cells use whatever training
    cells exist. A cell survives when M > scale * estimate.
    """
    if guard < 0 or train < 1:
        raise FilterError("need guard >= 0 and train >= 1")
    A = cube.dense_shape[2]
    if A <= 2 * guard + 1:
        raise FilterError(
            f"azimuth extent {A} leaves no training cells outside guard {guard}"
        )
    m = cube.mean_power()
    csum = np.concatenate(
        [np.zeros(m.shape[:2] + (1,)), np.cumsum(m, axis=2)], axis=2
    )

    a = np.arange(A)
    left_lo = np.clip(a - guard - train, 0, A)
    left_hi = np.clip(a - guard, 0, A)
    right_lo = np.clip(a + guard + 1, 0, A)
    right_hi = np.clip(a + guard + train + 1, 0, A)

    sums = (
        csum[..., left_hi]
        - csum[..., left_lo]
        + csum[..., right_hi]
        - csum[..., right_lo]
    )
    counts = (left_hi - left_lo) + (right_hi - right_lo)
    noise = sums / counts
    keep = m > scale * noise
    return sparse_from_mask(cube, keep)


def to_dense(sparse: SparseSpectrum, cube_axes: RadarCube3 = None) -> np.ndarray:
    """Scatter a sparse spectrum back to a dense (R, E, A, 3) array."""
    if len(sparse):
        flat = np.ravel_multi_index(sparse.indices.T, sparse.dense_shape)
        if len(np.unique(flat)) != len(flat):
            raise SparseError("duplicate (r, e, a) indices")
    dense = np.zeros(sparse.dense_shape + (3,))
    r, e, a = sparse.indices.T
    dense[r, e, a] = sparse.values
    return dense


# ---------------------------------------------------------------------------
# RXS1 sparse file format
#
# magic "RXS1" | u32 N | u32 R, E, A | N * (u16 r, u16 e, u16 a, 3 x f32)
# little-endian throughout. Values quantize to f32 on disk; a read-back
# re-write is byte-identical.

RXS_MAGIC = b"RXS1"

_RECORD_DTYPE = np.dtype(
    [("r", "<u2"), ("e", "<u2"), ("a", "<u2"), ("v", "<f4", (3,))]
)


class CodecError(ValueError):
    """Malformed RXS1 bytes."""


def dumps_rxs(sparse: SparseSpectrum) -> bytes:
    if np.any(np.asarray(sparse.dense_shape) > 0xFFFF) or len(sparse) > 0xFFFFFFFF:
        raise CodecError("extents or point count exceed the format's field widths")
    header = RXS_MAGIC + struct.pack("<I", len(sparse))
    header += struct.pack("<3I", *sparse.dense_shape)
    records = np.empty(len(sparse), dtype=_RECORD_DTYPE)
    records["r"] = sparse.indices[:, 0]
    records["e"] = sparse.indices[:, 1]
    records["a"] = sparse.indices[:, 2]
    records["v"] = sparse.values.astype("<f4")
    return header + records.tobytes()


def loads_rxs(blob: bytes) -> SparseSpectrum:
    if blob[:4] != RXS_MAGIC:
        raise CodecError(f"bad magic {blob[:4]!r}, expected {RXS_MAGIC!r}")
    (n,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from("<3I", blob, 8)
    offset = 20
    expected = offset + n * _RECORD_DTYPE.itemsize
    if len(blob) != expected:
        raise CodecError(f"payload size {len(blob)}, expected {expected}")
    records = np.frombuffer(blob, dtype=_RECORD_DTYPE, count=n, offset=offset)
    indices = np.column_stack(
        [records["r"], records["e"], records["a"]]
    ).astype(np.int64)
    values = records["v"].astype(np.float64).reshape(-1, 3)
    return SparseSpectrum(indices=indices, values=values, dense_shape=tuple(shape))


def write_rxs(path: Union[str, Path], sparse: SparseSpectrum) -> None:
    Path(path).write_bytes(dumps_rxs(sparse))


def read_rxs(path: Union[str, Path]) -> SparseSpectrum:
    return loads_rxs(Path(path).read_bytes())

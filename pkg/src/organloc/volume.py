"""Scalar volumes: VOL1 file I/O, intensity normalization and box cropping.

Arrays are indexed ``data[x, y, z]``. On disk voxels are stored x-fastest,
which is Fortran order for that indexing.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from organloc.errors import DimOverflow, MagicMismatch, TruncatedFile, ZeroVariance
from organloc.geometry import Box3, Spacing

MAGIC = b"VOL1"
_HEADER = struct.Struct("<4s3I3f")
MAX_VOXELS = 2**31

DEFAULT_GRID = 24


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: Spacing = field(default_factory=Spacing)
    normalized: bool = False

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        # spacing is stored as 32-bit floats on disk
        sp = tuple(float(np.float32(s)) for s in self.spacing.as_tuple())
        object.__setattr__(self, "spacing", Spacing(*sp))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def looks_normalized(data: np.ndarray) -> bool:
    d = data.astype(np.float64)
    return abs(d.mean()) <= 1e-3 and abs(d.std() - 1.0) <= 1e-2


def normalize(vol: Volume) -> Volume:
    """Shift and scale intensities to zero mean and unit variance."""
    d = vol.data.astype(np.float64)
    if d.size < 2:
        raise ZeroVariance("normalization needs at least two voxels")
    std = d.std()
    if not std > 0:
        raise ZeroVariance("volume has constant intensity")
    out = ((d - d.mean()) / std).astype(np.float32)
    return Volume(out, vol.spacing, normalized=True)


def _axis_weights(lo: float, hi: float, n: int, grid: int):
    """Lower index, upper index, upper weight and in-bounds mask for one axis."""
    # sample centers in voxel-index space (voxel i is centered at i + 0.5)
    pos = lo + (np.arange(grid) + 0.5) * ((hi - lo) / grid) - 0.5
    inside = (pos >= 0.0) & (pos <= n - 1)
    if n == 1:
        zeros = np.zeros(grid, dtype=np.intp)
        return zeros, zeros, np.zeros(grid), inside
    i0 = np.clip(np.floor(pos), 0, n - 2).astype(np.intp)
    t = np.where(inside, pos - i0, 0.0)
    return i0, i0 + 1, t, inside


def crop_resample(vol: Volume, box: Box3, grid: int = DEFAULT_GRID) -> np.ndarray:
    """Trilinearly sample a ``grid``^3 lattice of cell centers inside ``box``.

    Samples falling outside ``[0, dim - 1]`` on any axis are 0.
    Returns a float32 array of shape ``(grid, grid, grid)``.
    """
    if grid < 1:
        raise ValueError("grid must be positive")
    data = vol.data
    wx, wy, wz = (
        _axis_weights(lo, hi, n, grid) for lo, hi, n in zip(box.lo, box.hi, data.shape)
    )
    # separable interpolation: x, then y, then z
    i0, i1, t, _ = wx
    a = data[i0] * (1.0 - t)[:, None, None] + data[i1] * t[:, None, None]
    i0, i1, t, _ = wy
    a = a[:, i0] * (1.0 - t)[None, :, None] + a[:, i1] * t[None, :, None]
    i0, i1, t, _ = wz
    a = a[:, :, i0] * (1.0 - t)[None, None, :] + a[:, :, i1] * t[None, None, :]
    mask = wx[3][:, None, None] & wy[3][None, :, None] & wz[3][None, None, :]
    return np.where(mask, a, 0.0).astype(np.float32)


def to_bytes(vol: Volume) -> bytes:
    dx, dy, dz = vol.dims
    if dx * dy * dz > MAX_VOXELS:
        raise DimOverflow(f"{dx}x{dy}x{dz} exceeds {MAX_VOXELS} voxels")
    header = _HEADER.pack(MAGIC, dx, dy, dz, *vol.spacing.as_tuple())
    return header + vol.data.astype("<f4").tobytes(order="F")


def from_bytes(buf: bytes) -> Volume:
    if len(buf) < _HEADER.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise MagicMismatch("not a VOL1 file")
        raise TruncatedFile(f"header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, dx, dy, dz, sx, sy, sz = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MagicMismatch(f"bad magic {magic!r}")
    n = dx * dy * dz
    if n > MAX_VOXELS:
        raise DimOverflow(f"{dx}x{dy}x{dz} exceeds {MAX_VOXELS} voxels")
    if n == 0:
        raise ValueError("VOL1 header declares an empty volume")
    need = _HEADER.size + 4 * n
    if len(buf) < need:
        raise TruncatedFile(f"expected {need} bytes, file has {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).reshape((dx, dy, dz), order="F")
    return Volume(data, Spacing(sx, sy, sz), normalized=looks_normalized(data))


def write_vol(vol: Volume, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(vol))


def read_vol(path: str | os.PathLike) -> Volume:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def content_hash(vol: Volume) -> str:
    return hashlib.sha256(to_bytes(vol)).hexdigest()

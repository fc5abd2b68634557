"""Continuous axis-aligned 3D boxes and the eleven localization actions.

Box coordinates are continuous voxel-index units: voxel ``i`` occupies the
cell ``[i, i + 1)`` along its axis, so an integer box ``[a, b]`` covers
voxels ``a .. b - 1``.

All coordinates are snapped to a dyadic lattice of pitch ``2**-40``. On that
lattice sums and differences of coordinates below ``2**12`` in magnitude are
exact in double precision, which makes translations preserve extents
bit-for-bit and keeps centers fixed under symmetric resizing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

_LATTICE = float(2**40)
MAX_COORD = float(2**12)


def snap(v: float) -> float:
    """Round ``v`` onto the coordinate lattice."""
    return round(v * _LATTICE) / _LATTICE


class Action(IntEnum):
    TX_POS = 0
    TX_NEG = 1
    TY_POS = 2
    TY_NEG = 3
    TZ_POS = 4
    TZ_NEG = 5
    SCALE_UP = 6
    SCALE_DOWN = 7
    THINNER = 8
    FLATTER = 9
    TALLER = 10


N_ACTIONS = len(Action)


@dataclass(frozen=True, slots=True)
class Spacing:
    """Millimetres per voxel along x, y, z."""

    sx: float = 3.0
    sy: float = 3.0
    sz: float = 3.0

    def __post_init__(self):
        if not all(math.isfinite(s) and s > 0 for s in self.as_tuple()):
            raise ValueError(f"spacing must be positive, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.sx, self.sy, self.sz)


@dataclass(frozen=True, slots=True)
class Box3:
    x0: float
    y0: float
    z0: float
    x1: float
    y1: float
    z1: float

    def __post_init__(self):
        for name in ("x0", "y0", "z0", "x1", "y1", "z1"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or abs(v) >= MAX_COORD:
                raise ValueError(f"box coordinate {name}={v} is not a finite value below {MAX_COORD}")
            object.__setattr__(self, name, snap(v))
        if not (self.x1 > self.x0 and self.y1 > self.y0 and self.z1 > self.z0):
            raise ValueError(f"box extents must be positive: {self.as_tuple()}")

    @classmethod
    def from_seq(cls, values: Iterable[float]) -> "Box3":
        return cls(*[float(v) for v in values])

    @classmethod
    def from_bounds(cls, lo: Sequence[float], hi: Sequence[float]) -> "Box3":
        return cls(lo[0], lo[1], lo[2], hi[0], hi[1], hi[2])

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.x0, self.y0, self.z0, self.x1, self.y1, self.z1)

    @property
    def lo(self) -> tuple[float, float, float]:
        return (self.x0, self.y0, self.z0)

    @property
    def hi(self) -> tuple[float, float, float]:
        return (self.x1, self.y1, self.z1)

    @property
    def extents(self) -> tuple[float, float, float]:
        return (self.x1 - self.x0, self.y1 - self.y0, self.z1 - self.z0)

    @property
    def center(self) -> tuple[float, float, float]:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2, (self.z0 + self.z1) / 2)

    @property
    def volume(self) -> float:
        ex, ey, ez = self.extents
        return ex * ey * ez

    def translated(self, dx: float, dy: float, dz: float) -> "Box3":
        return Box3(self.x0 + dx, self.y0 + dy, self.z0 + dz, self.x1 + dx, self.y1 + dy, self.z1 + dz)

    def rounded(self, eps: float) -> tuple[float, ...]:
        """Coordinates rounded to multiples of ``eps``; used as an equality key."""
        return tuple(round(v / eps) for v in self.as_tuple())


# (axis, sign) for translations; axis-extent changes for deformations
_TRANSLATIONS = {
    Action.TX_POS: (0, 1), Action.TX_NEG: (0, -1),
    Action.TY_POS: (1, 1), Action.TY_NEG: (1, -1),
    Action.TZ_POS: (2, 1), Action.TZ_NEG: (2, -1),
}
_DEFORMATIONS = {Action.THINNER: (0, -1), Action.FLATTER: (1, -1), Action.TALLER: (2, 1)}


def apply_action(box: Box3, action: Action, alpha: float, taller_sign: int = 1) -> Box3:
    """Return ``box`` transformed by ``action``.

    Every step is ``alpha`` times the current extent along the affected axis.
    Translations shift both faces; ``SCALE_UP``/``SCALE_DOWN`` resize all
    axes about the center; ``THINNER``/``FLATTER`` shrink x/y and ``TALLER``
    grows z, again about the center. ``taller_sign=-1`` makes ``TALLER``
    shrink z instead.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    action = Action(action)
    lo = list(box.lo)
    hi = list(box.hi)
    ext = box.extents

    if action in _TRANSLATIONS:
        axis, sign = _TRANSLATIONS[action]
        d = sign * snap(alpha * ext[axis])
        lo[axis] += d
        hi[axis] += d
    elif action is Action.SCALE_UP or action is Action.SCALE_DOWN:
        sign = 1 if action is Action.SCALE_UP else -1
        for axis in range(3):
            half = sign * snap(alpha * ext[axis] / 2)
            lo[axis] -= half
            hi[axis] += half
    else:
        axis, sign = _DEFORMATIONS[action]
        if action is Action.TALLER:
            sign = taller_sign
        half = sign * snap(alpha * ext[axis] / 2)
        lo[axis] -= half
        hi[axis] += half
    return Box3.from_bounds(lo, hi)


def intersection_volume(a: Box3, b: Box3) -> float:
    vol = 1.0
    for alo, ahi, blo, bhi in zip(a.lo, a.hi, b.lo, b.hi):
        side = min(ahi, bhi) - max(alo, blo)
        if side <= 0:
            return 0.0
        vol *= side
    return vol


def iou(a: Box3, b: Box3) -> float:
    inter = intersection_volume(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.volume + b.volume - inter)


def wall_distance_mm(pred: Box3, truth: Box3, spacing: Spacing) -> float:
    """Mean absolute face offset over the six faces, in millimetres."""
    s = spacing.as_tuple() * 2
    return sum(abs(p - t) * si for p, t, si in zip(pred.as_tuple(), truth.as_tuple(), s)) / 6.0


def centroid_distance_mm(pred: Box3, truth: Box3, spacing: Spacing) -> float:
    d = [(p - t) * s for p, t, s in zip(pred.center, truth.center, spacing.as_tuple())]
    return math.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)


def boxes_to_array(boxes: Iterable[Box3]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)

"""Seeded synthetic phantoms: ellipsoid organs over a noisy background.

Randomness comes from numpy's Philox4x64-10 counter-based generator keyed
directly by the phantom seed, so a given seed yields the same volume on any
platform running the same numpy distribution code.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from organloc.errors import SpecInfeasible, UnknownOrgan
from organloc.geometry import Box3, Spacing
from organloc.volume import Volume, normalize, read_vol, write_vol

FOV_MODES = ("FULL", "CROPPED")
MAX_PLACEMENT_TRIES = 200
EDGE_WIDTH = 0.5  # voxels over which organ intensity falls off


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) % 2**64))


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: Spacing = field(default_factory=Spacing)
    organ_count: int = 1
    organ_intensity: tuple[float, float] = (1.0, 2.0)
    background_intensity: tuple[float, float] = (0.0, 0.3)
    noise_std: float = 0.1
    fov_mode: str = "FULL"
    min_semi_axis: float = 4.0
    max_semi_axis: float | None = None  # None means min(dims) / 3

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if not 1 <= self.organ_count <= 3:
            raise ValueError(f"organ_count must be in [1, 3], got {self.organ_count}")
        if self.fov_mode not in FOV_MODES:
            raise ValueError(f"fov_mode must be one of {FOV_MODES}, got {self.fov_mode!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        olo, ohi = self.organ_intensity
        blo, bhi = self.background_intensity
        if not (olo <= ohi and blo <= bhi and olo > bhi):
            raise ValueError("organ intensity range must lie strictly above the background range")
        if self.min_semi_axis < 4:
            raise ValueError("min_semi_axis must be at least 4 voxels")
        if self.semi_axis_range[1] < self.min_semi_axis:
            raise ValueError(f"semi-axis range {self.semi_axis_range} is empty for dims {self.dims}")

    @property
    def semi_axis_range(self) -> tuple[float, float]:
        cap = min(self.dims) / 3
        hi = cap if self.max_semi_axis is None else min(self.max_semi_axis, cap)
        return (self.min_semi_axis, hi)


@dataclass(frozen=True, eq=False)
class LabeledVolume:
    volume: Volume
    truth: list[tuple[int, Box3]]

    def box(self, organ_id: int) -> Box3:
        for oid, b in self.truth:
            if oid == organ_id:
                return b
        raise UnknownOrgan(f"organ {organ_id} not present (have {[o for o, _ in self.truth]})")

    @property
    def organ_ids(self) -> list[int]:
        return [o for o, _ in self.truth]


def _place_organs(spec: PhantomSpec, rng: np.random.Generator):
    rmin, rmax = spec.semi_axis_range
    dims = np.asarray(spec.dims, dtype=np.float64)
    placed: list[tuple[np.ndarray, np.ndarray]] = []
    for _ in range(spec.organ_count):
        for _ in range(MAX_PLACEMENT_TRIES):
            r = rng.uniform(rmin, rmax, size=3)
            # keep a one-voxel margin so the truth box is strictly inside
            lo, hi = r + 1.0, dims - r - 1.0
            if np.any(hi < lo):
                continue
            c = rng.uniform(lo, hi)
            box = Box3.from_bounds(c - r, c + r)
            if all(_disjoint(box, Box3.from_bounds(pc - pr, pc + pr)) for pc, pr in placed):
                placed.append((c, r))
                break
        else:
            raise SpecInfeasible(
                f"could not place {spec.organ_count} non-overlapping organs in {spec.dims} "
                f"after {MAX_PLACEMENT_TRIES} tries"
            )
    return placed


def _disjoint(a: Box3, b: Box3) -> bool:
    return any(ah <= bl or bh <= al for al, ah, bl, bh in zip(a.lo, a.hi, b.lo, b.hi))


def render_ellipsoid(dims, center, semi_axes) -> np.ndarray:
    """Soft occupancy in [0, 1]: exactly 0.5 on the ellipsoid surface."""
    x, y, z = (np.arange(n, dtype=np.float64) + 0.5 for n in dims)
    cx, cy, cz = center
    rx, ry, rz = semi_axes
    d = np.sqrt(
        ((x - cx) / rx)[:, None, None] ** 2
        + ((y - cy) / ry)[None, :, None] ** 2
        + ((z - cz) / rz)[None, None, :] ** 2
    )
    # logistic falloff in approximate voxel units of distance to the surface
    k = min(semi_axes) / EDGE_WIDTH
    return 0.5 * (1.0 - np.tanh(0.5 * k * (d - 1.0)))


def generate(spec: PhantomSpec) -> LabeledVolume:
    rng = make_rng(spec.seed)
    organs = _place_organs(spec, rng)
    background = rng.uniform(*spec.background_intensity)
    levels = rng.uniform(*spec.organ_intensity, size=len(organs))

    data = np.full(spec.dims, background, dtype=np.float64)
    for (c, r), level in zip(organs, levels):
        data += (level - background) * render_ellipsoid(spec.dims, c, r)
    if spec.noise_std > 0:
        data += rng.normal(0.0, spec.noise_std, size=spec.dims)

    boxes = [(c - r, c + r) for c, r in organs]
    if spec.fov_mode == "CROPPED":
        lo_all = np.min([b[0] for b in boxes], axis=0)
        hi_all = np.max([b[1] for b in boxes], axis=0)
        start = np.array([rng.integers(0, max(0, math.floor(v) - 1) + 1) for v in lo_all])
        stop = np.array(
            [rng.integers(min(n, math.ceil(v) + 1), n + 1) for v, n in zip(hi_all, spec.dims)]
        )
        data = data[start[0]:stop[0], start[1]:stop[1], start[2]:stop[2]]
        boxes = [(lo - start, hi - start) for lo, hi in boxes]

    truth = [(i + 1, Box3.from_bounds(lo, hi)) for i, (lo, hi) in enumerate(boxes)]
    vol = normalize(Volume(data.astype(np.float32), spec.spacing))
    return LabeledVolume(vol, truth)


def analytic_boxes(spec: PhantomSpec) -> list[Box3]:
    """Ellipsoid bounding boxes in full-FOV coordinates, replaying placement only."""
    organs = _place_organs(spec, make_rng(spec.seed))
    return [Box3.from_bounds(c - r, c + r) for c, r in organs]


# -- sidecars and manifests -------------------------------------------------

def format_truth(truth: list[tuple[int, Box3]]) -> str:
    lines = ["# organ_id x0 y0 z0 x1 y1 z1 (voxel units)"]
    for oid, b in truth:
        lines.append(" ".join([str(oid)] + [repr(v) for v in b.as_tuple()]))
    return "\n".join(lines) + "\n"


def parse_truth(text: str) -> list[tuple[int, Box3]]:
    truth = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"line {lineno}: expected 7 fields, got {len(parts)}")
        truth.append((int(parts[0]), Box3.from_seq(float(p) for p in parts[1:])))
    return truth


def write_truth(truth, path) -> None:
    Path(path).write_text(format_truth(truth), encoding="utf-8")


def read_truth(path) -> list[tuple[int, Box3]]:
    return parse_truth(Path(path).read_text(encoding="utf-8"))


def load_labeled(vol_path, truth_path) -> LabeledVolume:
    return LabeledVolume(read_vol(vol_path), read_truth(truth_path))


def read_manifest(path) -> list[tuple[Path, Path]]:
    """Entries as absolute (volume, sidecar) paths resolved against the manifest's folder."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected '<volume> <sidecar>'")
        entries.append((base / parts[0], base / parts[1]))
    return entries


def load_manifest(path) -> list[LabeledVolume]:
    return [load_labeled(v, t) for v, t in read_manifest(path)]


def volume_seed(base_seed: int, index: int) -> int:
    """Per-volume seed; distinct for distinct indices under one base seed."""
    return (int(base_seed) * 0x9E3779B97F4A7C15 + index) % 2**64


@dataclass(frozen=True)
class DatasetPaths:
    train_manifest: Path
    test_manifest: Path

    def digest(self) -> str:
        h = hashlib.sha256()
        for m in (self.train_manifest, self.test_manifest):
            h.update(m.read_bytes())
            for v, t in read_manifest(m):
                h.update(v.read_bytes())
                h.update(t.read_bytes())
        return h.hexdigest()


def generate_dataset(
    base_seed: int,
    n_train: int,
    n_test: int,
    template: PhantomSpec | None = None,
    out_dir: str | os.PathLike = ".",
) -> DatasetPaths:
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must both be at least 1")
    template = template or PhantomSpec()
    out = Path(out_dir)
    paths = {}
    index = 0
    for split, count in (("train", n_train), ("test", n_test)):
        (out / split).mkdir(parents=True, exist_ok=True)
        lines = []
        for k in range(count):
            seed = volume_seed(base_seed, index)
            index += 1
            lv = generate(replace(template, seed=seed))
            stem = f"{split}/vol_{k:03d}"
            write_vol(lv.volume, out / f"{stem}.vol")
            write_truth(lv.truth, out / f"{stem}.txt")
            lines.append(f"{stem}.vol {stem}.txt")
        manifest = out / f"{split}_manifest.txt"
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths[split] = manifest
    return DatasetPaths(paths["train"], paths["test"])


"""Shared test oracles and fixtures builders."""
import numpy as np

from organloc.geometry import Box3
from organloc.phantom import LabeledVolume
from organloc.volume import Volume


def voxel_count_iou(a: Box3, b: Box3, n: int) -> float:
    """Brute-force IoU of integer boxes by rasterizing them on an n^3 grid."""
    grid = np.arange(n)

    def mask(box):
        m = [(grid >= lo) & (grid < hi) for lo, hi in zip(box.lo, box.hi)]
        return m[0][:, None, None] & m[1][None, :, None] & m[2][None, None, :]

    ma, mb = mask(a), mask(b)
    inter = np.count_nonzero(ma & mb)
    if inter == 0:
        return 0.0
    return inter / np.count_nonzero(ma | mb)


def random_int_box(rng, n):
    lo = rng.integers(0, n, size=3)
    hi = [rng.integers(l + 1, n + 1) for l in lo]
    return Box3.from_bounds(lo.tolist(), hi)


def random_box(rng, span=60.0, min_ext=0.5, max_ext=40.0):
    lo = rng.uniform(-span / 2, span, size=3)
    ext = rng.uniform(min_ext, max_ext, size=3)
    return Box3.from_bounds(lo, lo + ext)


def make_labeled(dims=(32, 32, 32), target=(10, 12, 8, 20, 22, 18), seed=0, organ_id=1):
    """Normalized random-noise volume with an arbitrary target box."""
    data = np.random.default_rng(seed).normal(size=dims).astype(np.float32)
    vol = Volume((data - data.mean()) / data.std(), normalized=True)
    return LabeledVolume(vol, [(organ_id, Box3(*target))])

"""Box-localization MDP over a labeled volume.

States are immutable: :meth:`LocalizationEnv.step` returns a new state and
never mutates its argument, so hypothetical moves can be simulated freely.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from organloc.errors import EpisodeFinished
from organloc.geometry import Action, Box3, apply_action, iou
from organloc.phantom import LabeledVolume
from organloc.volume import DEFAULT_GRID, crop_resample

HISTORY = 4


class Mode(str, enum.Enum):
    TRAIN = "TRAIN"
    EVAL = "EVAL"


@dataclass(frozen=True)
class EnvConfig:
    alpha: float = 0.1
    tau: float = 0.85
    grid: int = DEFAULT_GRID
    max_steps_train: int = 200
    max_steps_eval: int = 100
    min_extent: float = 3.0
    gamma: float = 0.9
    init_coverage: float = 0.75
    init_jitter: float = 0.05
    taller_sign: int = -1
    osc_window: int = 20
    osc_eps: float = 1e-3

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.grid < 1:
            raise ValueError("grid must be positive")
        if self.max_steps_train < 1 or self.max_steps_eval < 1:
            raise ValueError("step budgets must be positive")
        if self.min_extent <= 0:
            raise ValueError("min_extent must be positive")
        if not 0 < self.init_coverage <= 1:
            raise ValueError("init_coverage must lie in (0, 1]")
        if self.init_jitter < 0:
            raise ValueError("init_jitter must be non-negative")
        if self.taller_sign not in (1, -1):
            raise ValueError("taller_sign must be +1 or -1")
        if self.osc_window < 1 or self.osc_eps <= 0:
            raise ValueError("oscillation window and rounding must be positive")


@dataclass(frozen=True, eq=False)
class EnvState:
    box: Box3
    history: tuple[np.ndarray, ...]  # oldest first
    step: int
    labeled: LabeledVolume
    organ_id: int
    target: Box3
    mode: Mode
    terminal: bool = False

    @property
    def iou(self) -> float:
        return iou(self.box, self.target)

    def network_input(self) -> np.ndarray:
        """The four history crops flattened and concatenated, oldest first."""
        return np.concatenate([h.ravel() for h in self.history])


@dataclass(frozen=True, eq=False)
class StepResult:
    state: EnvState
    reward: int
    terminal: bool
    iou_before: float
    iou_after: float


def sign_reward(iou_before: float, iou_after: float) -> int:
    """+1 when the overlap strictly improved, otherwise -1 (ties included)."""
    return 1 if iou_after > iou_before else -1


def clamp(box: Box3, dims: Sequence[int], min_extent: float = 3.0) -> Box3:
    """Limit ``box`` to ``[0, dim]`` per axis while keeping at least ``min_extent``."""
    lo, hi = [], []
    for a0, a1, n in zip(box.lo, box.hi, dims):
        a0 = min(max(a0, 0.0), float(n))
        a1 = min(max(a1, 0.0), float(n))
        m = min(float(min_extent), float(n))
        if a1 - a0 < m:
            c = (a0 + a1) / 2
            a0, a1 = c - m / 2, c + m / 2
            if a0 < 0:
                a0, a1 = 0.0, m
            elif a1 > n:
                a0, a1 = n - m, float(n)
        lo.append(a0)
        hi.append(a1)
    return Box3.from_bounds(lo, hi)


def detect_oscillation(boxes: Sequence[Box3], window: int = 20, eps: float = 1e-3) -> int | None:
    """Earliest index within the last ``window`` steps revisiting the current box."""
    if not boxes:
        raise ValueError("empty trace")
    n = len(boxes) - 1
    key = boxes[n].rounded(eps)
    for j in range(max(0, n - window), n):
        if boxes[j].rounded(eps) == key:
            return j
    return None


class LocalizationEnv:
    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()

    def initial_box(self, dims: Sequence[int], rng=None) -> Box3:
        cfg = self.config
        lo = [n * (1 - cfg.init_coverage) / 2 for n in dims]
        hi = [n * (1 + cfg.init_coverage) / 2 for n in dims]
        if rng is not None and cfg.init_jitter > 0:
            jit = rng.uniform(-1.0, 1.0, size=6)
            lo = [v + j * cfg.init_jitter * n for v, j, n in zip(lo, jit[:3], dims)]
            hi = [v + j * cfg.init_jitter * n for v, j, n in zip(hi, jit[3:], dims)]
        return self.clamp(Box3.from_bounds(lo, hi), dims)

    def clamp(self, box: Box3, dims: Sequence[int]) -> Box3:
        return clamp(box, dims, self.config.min_extent)

    def crop(self, labeled: LabeledVolume, box: Box3) -> np.ndarray:
        return crop_resample(labeled.volume, box, self.config.grid)

    def reset(self, labeled: LabeledVolume, organ_id: int, mode: Mode = Mode.EVAL, rng=None) -> EnvState:
        """Start an episode; jitter applies only in TRAIN mode."""
        mode = Mode(mode)
        target = labeled.box(organ_id)
        dims = labeled.volume.dims
        box = self.initial_box(dims, rng if mode is Mode.TRAIN else None)
        crop = self.crop(labeled, box)
        return EnvState(box, (crop,) * HISTORY, 0, labeled, organ_id, target, mode)

    def max_steps(self, mode: Mode) -> int:
        return self.config.max_steps_train if mode is Mode.TRAIN else self.config.max_steps_eval

    def next_box(self, state: EnvState, action: Action) -> Box3:
        cfg = self.config
        moved = apply_action(state.box, action, cfg.alpha, cfg.taller_sign)
        return self.clamp(moved, state.labeled.volume.dims)

    def step(self, state: EnvState, action: Action) -> StepResult:
        if state.terminal or state.step >= self.max_steps(state.mode):
            raise EpisodeFinished("episode already finished; call reset()")
        box = self.next_box(state, action)
        before = iou(state.box, state.target)
        after = iou(box, state.target)
        reward = sign_reward(before, after)
        step = state.step + 1
        terminal = step >= self.max_steps(state.mode)
        if state.mode is Mode.TRAIN and after >= self.config.tau:
            terminal = True
        history = state.history[1:] + (self.crop(state.labeled, box),)
        nxt = EnvState(box, history, step, state.labeled, state.organ_id, state.target, state.mode, terminal)
        return StepResult(nxt, reward, terminal, before, after)

    def guided_action_mask(self, state: EnvState) -> list[Action]:
        """Actions whose step would earn +1, in ordinal order; may be empty."""
        before = iou(state.box, state.target)
        return [
            a for a in Action
            if sign_reward(before, iou(self.next_box(state, a), state.target)) == 1
        ]


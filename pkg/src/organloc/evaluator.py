"""Greedy rollouts with oscillation stopping, metric aggregation and trace export."""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from organloc.environment import EnvConfig, LocalizationEnv, Mode, detect_oscillation
from organloc.geometry import N_ACTIONS, Action, Box3, Spacing, centroid_distance_mm, iou, wall_distance_mm
from organloc.phantom import LabeledVolume, load_manifest
from organloc.qnet import argmax_action

TRACE_HEADER = ["step", "x0", "y0", "z0", "x1", "y1", "z1", "action", "reward", "iou"] + [
    f"q{k}" for k in range(N_ACTIONS)
]
REPORT_HEADER = [
    "organ", "episodes",
    "iou_mean", "iou_std", "iou_median",
    "wall_mean_mm", "wall_std_mm", "wall_median_mm",
    "centroid_mean_mm", "centroid_std_mm", "centroid_median_mm",
]


class Termination(str, enum.Enum):
    OSCILLATION = "OSCILLATION"
    MAX_STEPS = "MAX_STEPS"
    THRESHOLD = "THRESHOLD"


@dataclass(frozen=True)
class TraceStep:
    box: Box3
    action: int  # action that produced this box, -1 for the initial box
    reward: int  # 0 for the initial box
    q: np.ndarray
    iou: float


@dataclass
class EpisodeTrace:
    steps: list[TraceStep] = field(default_factory=list)
    termination: Termination | None = None
    predicted: Box3 | None = None
    cycle_start: int | None = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def boxes(self) -> list[Box3]:
        return [s.box for s in self.steps]


def rollout(net, labeled: LabeledVolume, organ_id: int, env_cfg: EnvConfig | None = None):
    """Greedy episode from the central initial box.

    Stops when the current box repeats a box from the recent window, or after
    ``max_steps_eval`` actions. On oscillation the prediction is the box in
    the detected cycle with the highest max q-value; otherwise the last box.
    Returns ``(trace, predicted_box)``.
    """
    env_cfg = env_cfg or EnvConfig()
    env = LocalizationEnv(env_cfg)
    state = env.reset(labeled, organ_id, Mode.EVAL)
    q = np.asarray(net.forward(state.network_input()), dtype=np.float64)
    trace = EpisodeTrace([TraceStep(state.box, -1, 0, q, state.iou)])
    while True:
        j = detect_oscillation(trace.boxes, env_cfg.osc_window, env_cfg.osc_eps)
        if j is not None:
            cycle = trace.steps[j:]
            best = max(range(len(cycle)), key=lambda k: (cycle[k].q.max(), -k))
            trace.termination = Termination.OSCILLATION
            trace.cycle_start = j
            trace.predicted = cycle[best].box
            break
        if state.step >= env_cfg.max_steps_eval:
            trace.termination = Termination.MAX_STEPS
            trace.predicted = state.box
            break
        action = argmax_action(q)
        res = env.step(state, Action(action))
        state = res.state
        q = np.asarray(net.forward(state.network_input()), dtype=np.float64)
        trace.steps.append(TraceStep(state.box, action, res.reward, q, res.iou_after))
    return trace, trace.predicted


# -- statistics ---------------------------------------------------------------

@dataclass(frozen=True)
class Stat:
    mean: float
    std: float
    median: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "Stat":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            return cls(math.nan, math.nan, math.nan)
        return cls(float(v.mean()), float(v.std()), float(np.median(v)))


@dataclass(frozen=True)
class EpisodeResult:
    organ_id: int
    predicted: Box3
    truth: Box3
    iou: float
    wall_mm: float
    centroid_mm: float
    termination: Termination | None = None

    @classmethod
    def score(cls, organ_id, predicted: Box3, truth: Box3, spacing: Spacing, termination=None):
        return cls(organ_id, predicted, truth, iou(predicted, truth),
                   wall_distance_mm(predicted, truth, spacing),
                   centroid_distance_mm(predicted, truth, spacing), termination)


@dataclass(frozen=True)
class OrganStats:
    episodes: int
    iou: Stat
    wall_mm: Stat
    centroid_mm: Stat

    @classmethod
    def of(cls, results: Sequence[EpisodeResult]) -> "OrganStats":
        return cls(
            len(results),
            Stat.of([r.iou for r in results]),
            Stat.of([r.wall_mm for r in results]),
            Stat.of([r.centroid_mm for r in results]),
        )


@dataclass
class EvalReport:
    results: list[EpisodeResult]
    per_organ: dict[int, OrganStats]
    overall: OrganStats

    @classmethod
    def from_results(cls, results: Sequence[EpisodeResult]) -> "EvalReport":
        results = list(results)
        organs = sorted({r.organ_id for r in results})
        per = {o: OrganStats.of([r for r in results if r.organ_id == o]) for o in organs}
        return cls(results, per, OrganStats.of(results))

    def merged(self, other: "EvalReport") -> "EvalReport":
        return EvalReport.from_results(self.results + other.results)

    def _rows(self):
        for name, s in [(f"organ {o}", s) for o, s in self.per_organ.items()] + [("global", self.overall)]:
            yield name, s

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for name, s in self._rows():
            label = name.split()[-1] if name != "global" else "global"
            w.writerow([label, s.episodes] + [
                f"{v:.6f}" for st in (s.iou, s.wall_mm, s.centroid_mm) for v in (st.mean, st.std, st.median)
            ])
        return buf.getvalue()

    def to_table(self) -> str:
        head = ("", "Avg IoU", "Wall dist [mm]", "Centroid dist [mm]", "n")
        rows = [head]
        for name, s in self._rows():
            rows.append((
                name.capitalize() if name == "global" else name,
                f"{s.iou.mean:.2f}",
                f"{s.wall_mm.mean:.2f} ± {s.wall_mm.std:.2f}",
                f"{s.centroid_mm.mean:.2f} ± {s.centroid_mm.std:.2f}",
                str(s.episodes),
            ))
        o = self.overall
        rows.append(("Median", f"{o.iou.median:.2f}", f"{o.wall_mm.median:.2f}", f"{o.centroid_mm.median:.2f}", ""))
        widths = [max(len(r[k]) for r in rows) for k in range(len(head))]
        lines = []
        for i, r in enumerate(rows):
            lines.append("  ".join(c.ljust(widths[0]) if k == 0 else c.rjust(widths[k]) for k, c in enumerate(r)).rstrip())
            if i == 0 or i == len(rows) - 3:
                lines.append("-" * len(lines[-1]))
        return "\n".join(lines) + "\n"


def evaluate(
    net,
    volumes: Sequence[LabeledVolume] | str | Path,
    organ_id: int,
    env_cfg: EnvConfig | None = None,
    oracle: bool = False,
) -> EvalReport:
    """One greedy rollout per test volume, scored against the truth box.

    ``oracle=True`` bypasses the network and predicts the truth box itself,
    which checks the metric pipeline end to end.
    """
    if isinstance(volumes, (str, Path)):
        volumes = load_manifest(volumes)
    if not volumes:
        raise ValueError("no test volumes")
    results = []
    for lv in volumes:
        truth = lv.box(organ_id)
        if oracle:
            pred, term = truth, None
        else:
            trace, pred = rollout(net, lv, organ_id, env_cfg)
            term = trace.termination
        results.append(EpisodeResult.score(organ_id, pred, truth, lv.volume.spacing, term))
    return EvalReport.from_results(results)


# -- trace export ---------------------------------------------------------------

def trace_to_csv(trace: EpisodeTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for k, s in enumerate(trace.steps):
        w.writerow([k, *map(repr, s.box.as_tuple()), s.action, s.reward, repr(s.iou), *map(repr, s.q.tolist())])
    pred = trace.predicted.as_tuple() if trace.predicted else ()
    term = trace.termination.value if trace.termination else ""
    w.writerow(["#end", term, *map(repr, pred)])
    return buf.getvalue()


def export_trace(trace: EpisodeTrace, path) -> None:
    Path(path).write_text(trace_to_csv(trace), encoding="utf-8")


def parse_trace(text: str) -> EpisodeTrace:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != TRACE_HEADER:
        raise ValueError("not a trace file")
    trace = EpisodeTrace()
    for row in rows[1:]:
        if row[0] == "#end":
            trace.termination = Termination(row[1]) if row[1] else None
            if len(row) == 8:
                trace.predicted = Box3.from_seq(float(v) for v in row[2:])
            break
        box = Box3.from_seq(float(v) for v in row[1:7])
        trace.steps.append(TraceStep(box, int(row[7]), int(row[8]), np.array([float(v) for v in row[10:]]), float(row[9])))
    return trace


def read_trace(path) -> EpisodeTrace:
    return parse_trace(Path(path).read_text(encoding="utf-8"))

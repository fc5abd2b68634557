"""Deep Q-learning: replay buffer, guided epsilon-greedy exploration, training loop."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from organloc.environment import EnvConfig, EnvState, LocalizationEnv, Mode
from organloc.errors import BufferTooSmall, Divergence
from organloc.geometry import N_ACTIONS, Action
from organloc.phantom import LabeledVolume, load_manifest
from organloc.qnet import DEFAULT_HIDDEN, Adam, QNetwork, argmax_action, sync_target

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "episode", "steps", "mean_reward", "final_iou", "loss", "epsilon")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    anneal_epochs: int = 20
    eps_start: float = 1.0
    eps_end: float = 0.1
    batch_size: int = 48
    capacity: int = 14_000
    target_sync: int = 500
    warmup: int = 480
    lr: float = 1e-4
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    precision: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.anneal_epochs < 0:
            raise ValueError("epochs and anneal_epochs must be non-negative")
        if self.anneal_epochs > self.epochs:
            raise ValueError(f"anneal_epochs ({self.anneal_epochs}) exceeds epochs ({self.epochs})")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if not 1 <= self.batch_size <= self.capacity:
            raise ValueError("batch_size must lie in [1, capacity]")
        if self.target_sync < 1 or self.warmup < 1:
            raise ValueError("target_sync and warmup must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden layer sizes must be positive")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass(frozen=True, slots=True)
class Transition:
    state: tuple[np.ndarray, ...]
    action: int
    reward: int
    next_state: tuple[np.ndarray, ...]
    terminal: bool


def stack_states(states: Sequence[tuple[np.ndarray, ...]]) -> np.ndarray:
    return np.stack([np.concatenate([c.ravel() for c in s]) for s in states])


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int = 14_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Transition:
        return self._items[i]

    def push(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, len(self._items), size=n)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        if not self._items:
            raise BufferTooSmall("cannot sample from an empty buffer")
        return [self._items[i] for i in self.sample_indices(n, rng)]


def epsilon(epoch: int, cfg: TrainConfig) -> float:
    """Linear anneal from ``eps_start`` to ``eps_end`` over ``anneal_epochs``, flat afterwards."""
    if cfg.anneal_epochs == 0:
        return cfg.eps_end
    return max(cfg.eps_end, cfg.eps_start - (cfg.eps_start - cfg.eps_end) * epoch / cfg.anneal_epochs)


def choose_action(net, state_input, eps: float, guided_mask, rng) -> tuple[Action, bool]:
    """Epsilon-greedy choice; returns the action and whether it was exploratory.

    ``guided_mask`` is a sequence of actions or a zero-argument callable
    producing one, so the mask is only computed when exploring.
    """
    if not 0 <= eps <= 1:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    if rng.random() < eps:
        mask = list(guided_mask() if callable(guided_mask) else guided_mask)
        pool = mask if mask else list(Action)
        return Action(pool[int(rng.integers(len(pool)))]), True
    return Action(argmax_action(net.forward(state_input))), False


def select_action(net, state_input, eps: float, guided_mask, rng) -> Action:
    return choose_action(net, state_input, eps, guided_mask, rng)[0]


def bellman_values(rewards, terminals, next_q, gamma: float) -> np.ndarray:
    """``r`` for terminal transitions, ``r + gamma * max_a' q'`` otherwise."""
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    best = np.asarray(next_q, dtype=np.float64).max(axis=1)
    return np.where(terminals, rewards, rewards + gamma * best)


def bellman_target(batch: Sequence[Transition], target_net: QNetwork, gamma: float) -> np.ndarray:
    next_q = target_net.forward(stack_states([t.next_state for t in batch]))
    return bellman_values([t.reward for t in batch], [t.terminal for t in batch], next_q, gamma)


def dqn_loss_and_grads(net: QNetwork, states: np.ndarray, actions: np.ndarray, targets: np.ndarray):
    """Mean squared Bellman error and its parameter gradients (taken action only)."""
    q, cache = net.forward_cached(states.astype(net.dtype, copy=False))
    rows = np.arange(len(actions))
    err = targets - q[rows, actions].astype(np.float64)
    loss = float(np.mean(err**2))
    grad_out = np.zeros_like(q)
    grad_out[rows, actions] = (-2.0 * err / len(actions)).astype(q.dtype)
    return loss, net.backward_cached(cache, grad_out)


def train_step(
    net: QNetwork,
    target_net: QNetwork,
    buffer: ReplayBuffer,
    opt: Adam,
    cfg: TrainConfig,
    rng: np.random.Generator,
    gamma: float = 0.9,
) -> float:
    if len(buffer) < cfg.warmup:
        raise BufferTooSmall(f"buffer holds {len(buffer)} transitions, warmup needs {cfg.warmup}")
    batch = buffer.sample(cfg.batch_size, rng)
    targets = bellman_target(batch, target_net, gamma)
    states = stack_states([t.state for t in batch])
    actions = np.array([t.action for t in batch], dtype=np.intp)
    loss, grads = dqn_loss_and_grads(net, states, actions, targets)
    if not math.isfinite(loss):
        raise Divergence(f"non-finite loss {loss}")
    opt.step(net, grads)
    return loss


@dataclass(frozen=True)
class EpisodeRecord:
    epoch: int
    episode: int
    steps: int
    mean_reward: float
    final_iou: float
    loss: float
    epsilon: float


@dataclass
class TrainingLog:
    rows: list[EpisodeRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in self.rows:
            w.writerow([r.epoch, r.episode, r.steps, f"{r.mean_reward:.6f}", f"{r.final_iou:.6f}",
                        f"{r.loss:.6g}", f"{r.epsilon:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def epoch_summary(self) -> list[dict]:
        out = []
        for e in sorted({r.epoch for r in self.rows}):
            rows = [r for r in self.rows if r.epoch == e]
            losses = [r.loss for r in rows if math.isfinite(r.loss)]
            out.append({
                "epoch": e,
                "mean_reward": float(np.mean([r.mean_reward for r in rows])),
                "final_iou": float(np.mean([r.final_iou for r in rows])),
                "loss": float(np.mean(losses)) if losses else math.nan,
                "epsilon": rows[0].epsilon,
            })
        return out


@dataclass(frozen=True)
class StepEvent:
    """Emitted to a training observer after every environment step."""

    epoch: int
    episode: int
    state: EnvState
    action: Action
    explored: bool
    mask: tuple[Action, ...] | None  # set only for exploratory steps
    reward: int
    terminal: bool
    optimizer_steps: int
    target: QNetwork


@dataclass
class TrainResult:
    net: QNetwork
    log: TrainingLog
    target: QNetwork
    optimizer_steps: int = 0


def train(
    volumes: Sequence[LabeledVolume] | str | Path,
    organ_id: int,
    cfg: TrainConfig | None = None,
    env_cfg: EnvConfig | None = None,
    observer: Callable[[StepEvent], None] | None = None,
) -> TrainResult:
    """Train one agent for ``organ_id``; one episode per volume per epoch."""
    cfg = cfg or TrainConfig()
    env_cfg = env_cfg or EnvConfig()
    if isinstance(volumes, (str, Path)):
        volumes = load_manifest(volumes)
    if not volumes:
        raise ValueError("no training volumes")
    env = LocalizationEnv(env_cfg)
    rng = np.random.default_rng(cfg.seed)
    net = QNetwork.create(env_cfg.grid, cfg.hidden, seed=cfg.seed, dtype=cfg.dtype)
    target = sync_target(net)
    opt = Adam(net, lr=cfg.lr)
    buffer = ReplayBuffer(cfg.capacity)
    tlog = TrainingLog()
    opt_steps = 0

    for epoch in range(cfg.epochs):
        eps = epsilon(epoch, cfg)
        for ep, lv in enumerate(volumes):
            state = env.reset(lv, organ_id, Mode.TRAIN, rng)
            rewards, losses = [], []
            while True:
                mask_cache: list = []

                def mask(state=state):
                    mask_cache.append(tuple(env.guided_action_mask(state)))
                    return mask_cache[-1]

                action, explored = choose_action(net, state.network_input(), eps, mask, rng)
                res = env.step(state, action)
                buffer.push(Transition(state.history, int(action), res.reward, res.state.history, res.terminal))
                rewards.append(res.reward)
                if len(buffer) >= cfg.warmup:
                    losses.append(train_step(net, target, buffer, opt, cfg, rng, env_cfg.gamma))
                    opt_steps += 1
                    if opt_steps % cfg.target_sync == 0:
                        target = sync_target(net)
                if observer is not None:
                    observer(StepEvent(epoch, ep, state, action, explored,
                                       mask_cache[-1] if mask_cache else None, res.reward, res.terminal,
                                       opt_steps, target))
                state = res.state
                if res.terminal:
                    break
            tlog.rows.append(EpisodeRecord(
                epoch, ep, state.step, float(np.mean(rewards)), state.iou,
                float(np.mean(losses)) if losses else math.nan, eps,
            ))
        summary = tlog.epoch_summary()[-1]
        log.info("epoch %d: eps=%.3f reward=%.3f final_iou=%.3f loss=%.4g",
                 epoch, eps, summary["mean_reward"], summary["final_iou"], summary["loss"])
    return TrainResult(net, tlog, target, opt_steps)

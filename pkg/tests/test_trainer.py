import math

import numpy as np
import pytest

from organloc.environment import EnvConfig, LocalizationEnv, Mode
from organloc.errors import BufferTooSmall
from organloc.geometry import Action
from organloc.phantom import PhantomSpec, generate
from organloc.qnet import Adam, QNetwork
from organloc.trainer import (
    LOG_HEADER,
    ReplayBuffer,
    TrainConfig,
    Transition,
    bellman_target,
    bellman_values,
    dqn_loss_and_grads,
    epsilon,
    select_action,
    train,
    train_step,
)

from helpers import make_labeled


def crops(value, grid=1):
    return tuple(np.full((grid,) * 3, value, dtype=np.float64) for _ in range(4))


def tiny_net(seed=0):
    # grid 1 -> input of 4 values
    return QNetwork.create(grid=1, hidden=(6, 5), seed=seed, dtype=np.float64)


class ConstQ:
    """Stub network returning fixed q-values for any input."""

    def __init__(self, q):
        self.q = np.asarray(q, dtype=np.float64)

    def forward(self, x):
        x = np.asarray(x)
        return self.q if x.ndim == 1 else np.tile(self.q, (x.shape[0], 1))


def small_train_cfg(**kw):
    base = dict(epochs=2, anneal_epochs=1, batch_size=4, capacity=200, target_sync=7, warmup=8,
                hidden=(8,), seed=3)
    base.update(kw)
    return TrainConfig(**base)


def small_env_cfg(**kw):
    base = dict(grid=3, max_steps_train=25)
    base.update(kw)
    return EnvConfig(**base)


@pytest.fixture(scope="module")
def phantoms():
    spec = PhantomSpec(dims=(24, 24, 24), min_semi_axis=4, max_semi_axis=7)
    return [generate(PhantomSpec(**{**spec.__dict__, "seed": s})) for s in (1, 2)]


# -- epsilon ----------------------------------------------------------------------

def test_epsilon_schedule_values():
    cfg = TrainConfig()
    assert epsilon(0, cfg) == 1.0
    assert epsilon(10, cfg) == pytest.approx(0.55, abs=1e-15)
    for e in range(20, 30):
        assert epsilon(e, cfg) == 0.1


def test_epsilon_closed_form_every_epoch():
    cfg = TrainConfig(epochs=30, anneal_epochs=20)
    for e in range(30):
        expected = max(0.1, 1.0 - 0.9 * e / 20)
        assert epsilon(e, cfg) == expected
    assert all(epsilon(e, cfg) >= epsilon(e + 1, cfg) for e in range(29))


def test_epsilon_without_annealing():
    assert epsilon(0, TrainConfig(anneal_epochs=0)) == 0.1


@pytest.mark.parametrize("kw", [{"anneal_epochs": 31}, {"batch_size": 0}, {"batch_size": 20_000},
                                {"eps_end": 0.5, "eps_start": 0.2}, {"precision": 16}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- replay buffer ------------------------------------------------------------------

def numbered(k):
    return Transition(crops(k), 0, 1, crops(k), False)


def test_buffer_fifo_overwrite():
    buf = ReplayBuffer(capacity=10)
    for k in range(13):
        buf.push(numbered(k))
    assert len(buf) == 10
    ids = sorted(int(buf[i].state[0].item()) for i in range(len(buf)))
    assert ids == list(range(3, 13))


def test_buffer_never_exceeds_capacity():
    buf = ReplayBuffer(capacity=5)
    for k in range(50):
        buf.push(numbered(k))
        assert len(buf) == min(k + 1, 5)


def test_buffer_uniform_sampling():
    buf = ReplayBuffer(capacity=100)
    for k in range(100):
        buf.push(numbered(k))
    idx = buf.sample_indices(100_000, np.random.default_rng(0))
    counts = np.bincount(idx, minlength=100)
    assert counts.min() >= 800 and counts.max() <= 1200
    sample = buf.sample(5, np.random.default_rng(0))
    assert all(isinstance(t, Transition) for t in sample)


def test_buffer_empty_sample():
    with pytest.raises(BufferTooSmall):
        ReplayBuffer(4).sample(1, np.random.default_rng(0))


# -- action selection ------------------------------------------------------------------

def test_greedy_action_is_argmax(rng):
    q = np.arange(11.0)[::-1].copy()
    q[6] = 100
    for _ in range(20):
        assert select_action(ConstQ(q), np.zeros(4), 0.0, [Action.TX_POS], rng) == Action.SCALE_UP


def test_greedy_tie_break_lowest_ordinal(rng):
    assert select_action(ConstQ(np.zeros(11)), np.zeros(4), 0.0, [], rng) == Action(0)


def test_explore_uses_guided_mask(labeled, rng):
    env = LocalizationEnv(EnvConfig(grid=4))
    state = env.reset(labeled, 1, Mode.TRAIN, rng)
    for _ in range(30):
        mask = env.guided_action_mask(state)
        a = select_action(ConstQ(np.zeros(11)), state.network_input(), 1.0, mask, rng)
        if mask:
            assert a in mask
            assert env.step(state, a).reward == 1
        res = env.step(state, a)
        if res.terminal:
            break
        state = res.state


def test_explore_empty_mask_is_uniform():
    rng = np.random.default_rng(5)
    picks = [select_action(ConstQ(np.zeros(11)), np.zeros(4), 1.0, [], rng) for _ in range(5500)]
    counts = np.bincount([int(a) for a in picks], minlength=11)
    assert counts.min() > 400 and counts.max() < 600


def test_select_action_rejects_bad_eps(rng):
    with pytest.raises(ValueError):
        select_action(ConstQ(np.zeros(11)), np.zeros(4), 1.5, [], rng)


# -- Bellman targets ---------------------------------------------------------------------

def test_bellman_examples():
    next_q = np.zeros((3, 11))
    next_q[1, 4] = 2.0
    next_q[2] = -0.5
    out = bellman_values([1, -1, 1], [True, False, False], next_q, 0.9)
    assert out[0] == 1.0
    assert out[1] == pytest.approx(0.8, abs=1e-12)
    assert out[2] == pytest.approx(1 - 0.45, abs=1e-12)


def test_bellman_myopic():
    next_q = np.random.default_rng(0).normal(size=(5, 11))
    assert np.array_equal(bellman_values([1, -1, -1, 1, 1], [False] * 5, next_q, 0.0), [1, -1, -1, 1, 1])


def test_bellman_target_uses_target_net():
    net = tiny_net(1)
    batch = [Transition(crops(0.1), 2, -1, crops(k / 3), k == 2) for k in range(3)]
    out = bellman_target(batch, net, 0.9)
    for k, t in enumerate(batch):
        x = np.concatenate([c.ravel() for c in t.next_state])
        hand = t.reward if t.terminal else t.reward + 0.9 * max(net.forward(x))
        assert out[k] == pytest.approx(hand, abs=1e-9)
    assert out[2] == -1.0


# -- train step ---------------------------------------------------------------------------------

def fill(buf, transitions):
    for t in transitions:
        buf.push(t)
    return buf


def test_train_step_needs_warmup():
    net = tiny_net()
    cfg = TrainConfig(batch_size=2, warmup=4, capacity=10)
    buf = fill(ReplayBuffer(10), [numbered(0)] * 3)
    with pytest.raises(BufferTooSmall):
        train_step(net, net.copy(), buf, Adam(net), cfg, np.random.default_rng(0))


def test_train_step_single_transition_loss():
    net, target = tiny_net(0), tiny_net(9)
    t = Transition(crops(0.3), 5, -1, crops(-0.2), False)
    cfg = TrainConfig(batch_size=1, warmup=1, capacity=4)
    x = np.concatenate([c.ravel() for c in t.state])
    xn = np.concatenate([c.ravel() for c in t.next_state])
    y = -1 + 0.9 * float(np.max(target.forward(xn)))
    expected = (y - float(net.forward(x)[5])) ** 2
    loss = train_step(net, target, fill(ReplayBuffer(4), [t]), Adam(net), cfg, np.random.default_rng(0))
    assert loss == expected


def test_train_step_zero_loss_keeps_params():
    net = tiny_net(2)
    for w in net.weights:
        w[:] = 0.0
    net.biases[-1][:] = 1.0  # q == 1 everywhere
    t = Transition(crops(0.5), 3, 1, crops(0.5), True)  # target = r = 1
    before = [p.copy() for p in net.params()]
    cfg = TrainConfig(batch_size=2, warmup=1, capacity=4)
    loss = train_step(net, net.copy(), fill(ReplayBuffer(4), [t]), Adam(net), cfg, np.random.default_rng(0))
    assert loss == 0.0
    for a, b in zip(before, net.params()):
        assert np.array_equal(a, b)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    net = tiny_net(4)
    for b in net.biases:
        b[:] = rng.normal(scale=0.3, size=b.shape)
    states = rng.normal(size=(5, 4))
    actions = rng.integers(0, 11, size=5)
    targets = rng.normal(size=5)
    _, grads = dqn_loss_and_grads(net, states, actions, targets)
    h = 1e-5
    for (gw, gb), w, b in zip(grads, net.weights, net.biases):
        for p, g in ((w, gw), (b, gb)):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                lp = dqn_loss_and_grads(net, states, actions, targets)[0]
                flat[i] = old - h
                lm = dqn_loss_and_grads(net, states, actions, targets)[0]
                flat[i] = old
                num = (lp - lm) / (2 * h)
                assert abs(num - gflat[i]) <= 1e-4 * max(abs(num), abs(gflat[i]), 1e-6)


def test_gradient_only_through_taken_action():
    net = tiny_net(6)
    states = np.ones((1, 4))
    _, grads = dqn_loss_and_grads(net, states, np.array([7]), np.array([3.0]))
    gw_out, gb_out = grads[-1]
    assert np.count_nonzero(gb_out) == 1 and gb_out[7] != 0
    assert not np.delete(gw_out, 7, axis=0).any()


# -- full loop -------------------------------------------------------------------------------

def test_zero_epochs_returns_fresh_net(phantoms):
    cfg = small_train_cfg(epochs=0, anneal_epochs=0)
    res = train(phantoms, 1, cfg, small_env_cfg())
    assert res.net == QNetwork.create(3, (8,), seed=3)
    assert res.log.rows == [] and res.optimizer_steps == 0
    assert res.log.to_csv() == ",".join(LOG_HEADER) + "\n"


def test_training_is_deterministic(phantoms):
    a = train(phantoms, 1, small_train_cfg(), small_env_cfg())
    b = train(phantoms, 1, small_train_cfg(), small_env_cfg())
    assert a.log.digest() == b.log.digest()
    assert a.net == b.net
    assert a.optimizer_steps > 0
    c = train(phantoms, 1, small_train_cfg(seed=4), small_env_cfg())
    assert c.log.digest() != a.log.digest()


def test_training_log_structure(phantoms):
    res = train(phantoms, 1, small_train_cfg(), small_env_cfg())
    rows = res.log.rows
    assert [(r.epoch, r.episode) for r in rows] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert [r.epsilon for r in rows] == [1.0, 1.0, 0.1, 0.1]
    for r in rows:
        assert 1 <= r.steps <= 25
        assert -1 <= r.mean_reward <= 1 and 0 <= r.final_iou <= 1
    lines = res.log.to_csv().splitlines()
    assert lines[0] == "epoch,episode,steps,mean_reward,final_iou,loss,epsilon"
    assert len(lines) == 5


def test_target_changes_only_at_sync(phantoms):
    seen = []

    def observer(ev):
        seen.append((ev.optimizer_steps, ev.target.digest()))

    res = train(phantoms, 1, small_train_cfg(), small_env_cfg(), observer=observer)
    assert res.optimizer_steps >= 14
    for (s0, h0), (s1, h1) in zip(seen, seen[1:]):
        if h0 != h1:
            assert s1 != s0 and s1 % 7 == 0
        if s0 // 7 != s1 // 7:
            assert h0 != h1


def test_guided_exploration_instrumented(phantoms):
    env = LocalizationEnv(small_env_cfg())
    checked = []

    def observer(ev):
        if ev.explored and ev.mask:
            assert ev.action in ev.mask
            assert ev.reward == 1
            assert env.step(ev.state, ev.action).reward == 1
            checked.append(ev)

    train(phantoms, 1, small_train_cfg(), small_env_cfg(), observer=observer)
    assert len(checked) > 20


def test_loss_is_nan_before_warmup(phantoms):
    res = train(phantoms, 1, small_train_cfg(warmup=10_000 // 100, capacity=200), small_env_cfg())
    assert math.isnan(res.log.rows[0].loss)


def test_train_requires_volumes():
    with pytest.raises(ValueError):
        train([], 1, small_train_cfg(), small_env_cfg())


def test_train_unknown_organ():
    from organloc.errors import UnknownOrgan
    with pytest.raises(UnknownOrgan):
        train([make_labeled()], 5, small_train_cfg(), small_env_cfg())

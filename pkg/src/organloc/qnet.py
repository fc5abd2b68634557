"""Fully-connected action-value network with a hand-written backward pass.

Layers map the four stacked crops (``4 * grid**3`` inputs) through leaky
rectifier hidden layers to one q-value per action. Weights are stored
``(out, in)`` so a layer computes ``x @ W.T + b``.
"""
from __future__ import annotations

import hashlib
import os
import struct
from typing import Sequence

import numpy as np

from organloc.errors import MagicMismatch, NonFiniteGradient, ShapeMismatch, TruncatedFile
from organloc.geometry import N_ACTIONS
from organloc.environment import HISTORY

LEAK = 0.01
DEFAULT_HIDDEN = (256, 128, 64)
MAGIC = b"QNT1"

Grads = list[tuple[np.ndarray, np.ndarray]]


def input_size(grid: int) -> int:
    return HISTORY * grid**3


class QNetwork:
    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], grid: int = 0):
        if len(weights) != len(biases) or not weights:
            raise ShapeMismatch("need one bias vector per weight matrix")
        self.weights = [np.array(w) for w in weights]
        self.biases = [np.array(b) for b in biases]
        self.grid = int(grid)
        self.sizes = [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeMismatch(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.sizes[k]:
                raise ShapeMismatch(f"layer {k} expects {w.shape[1]} inputs, previous layer gives {self.sizes[k]}")
        if self.sizes[-1] != N_ACTIONS:
            raise ShapeMismatch(f"output size must be {N_ACTIONS}, got {self.sizes[-1]}")
        if self.grid and self.sizes[0] != input_size(self.grid):
            raise ShapeMismatch(f"grid {self.grid} needs {input_size(self.grid)} inputs, got {self.sizes[0]}")
        expected = sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))
        assert self.num_params == expected

    @classmethod
    def create(
        cls,
        grid: int = 24,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        seed: int = 0,
        dtype=np.float32,
        n_inputs: int | None = None,
    ) -> "QNetwork":
        """He-uniform weights in +-sqrt(6 / fan_in), zero biases.

        ``n_inputs`` overrides the crop-derived input size (``grid`` is then
        recorded as 0), which is how tiny networks for gradient checks are built.
        """
        rng = np.random.default_rng(seed)
        n_in = input_size(grid) if n_inputs is None else int(n_inputs)
        sizes = [n_in, *hidden, N_ACTIONS]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases, grid if n_inputs is None else 0)

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "QNetwork":
        return QNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.grid)

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(p.tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, QNetwork):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.sizes == other.sizes
            and all(a.dtype == b.dtype and a.tobytes() == b.tobytes() for a, b in zip(self.params(), other.params()))
        )

    __hash__ = None

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.sizes[0]:
            raise ShapeMismatch(f"expected input of length {self.sizes[0]}, got shape {x.shape}")
        return x2.astype(self.dtype, copy=False), single

    def forward_cached(self, x2: np.ndarray):
        """Batched forward pass returning outputs and the per-layer inputs and pre-activations."""
        inputs, pre = [], []
        a = x2
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w.T + b
            pre.append(z)
            a = z if k == last else np.where(z > 0, z, LEAK * z)
        return a, (inputs, pre)

    def backward_cached(self, cache, grad_out: np.ndarray) -> Grads:
        inputs, pre = cache
        grads: Grads = [None] * len(self.weights)
        g = grad_out
        for k in range(len(self.weights) - 1, -1, -1):
            if k != len(self.weights) - 1:
                g = g * np.where(pre[k] > 0, 1.0, LEAK).astype(g.dtype)
            grads[k] = (g.T @ inputs[k], g.sum(axis=0))
            if k:
                g = g @ self.weights[k]
        return grads

    def forward(self, x) -> np.ndarray:
        x2, single = self._as_batch(x)
        out, _ = self.forward_cached(x2)
        return out[0] if single else out

    def backward(self, x, grad_out) -> Grads:
        """Parameter gradients of ``sum(forward(x) * grad_out)``; batches are summed."""
        x2, single = self._as_batch(x)
        g = np.asarray(grad_out, dtype=self.dtype)
        g2 = g[None, :] if g.ndim == 1 else g
        if g2.shape != (x2.shape[0], N_ACTIONS):
            raise ShapeMismatch(f"output gradient shape {g.shape} does not match batch of {x2.shape[0]}")
        _, cache = self.forward_cached(x2)
        return self.backward_cached(cache, g2)


def argmax_action(q: np.ndarray) -> int:
    """Greedy action; ``np.argmax`` already returns the lowest index among ties."""
    return int(np.argmax(q))


class Adam:
    """Bias-corrected adaptive-moment optimizer over a network's parameters."""

    def __init__(self, net: QNetwork, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in net.params()]
        self.v = [np.zeros_like(p) for p in net.params()]
        self.t = 0

    def step(self, net: QNetwork, grads: Grads) -> None:
        flat = [g for pair in grads for g in pair]
        if len(flat) != len(self.m):
            raise ShapeMismatch("gradient list does not match optimizer state")
        for g, m in zip(flat, self.m):
            if g.shape != m.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {m.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("gradient contains NaN or inf")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(net.params(), flat, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def sgd_step(net: QNetwork, grads: Grads, opt: Adam) -> None:
    opt.step(net, grads)


def sync_target(net: QNetwork) -> QNetwork:
    return net.copy()


# -- QNT1 checkpoints -------------------------------------------------------

def to_bytes(net: QNetwork) -> bytes:
    parts = [MAGIC, struct.pack("<II", net.grid, len(net.weights))]
    for w in net.weights:
        parts.append(struct.pack("<II", w.shape[1], w.shape[0]))
    parts += [w.astype("<f4").tobytes() for w in net.weights]
    parts += [b.astype("<f4").tobytes() for b in net.biases]
    return b"".join(parts)


def from_bytes(buf: bytes, grid: int | None = None) -> QNetwork:
    if buf[:4] != MAGIC:
        raise MagicMismatch(f"bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 12:
        raise TruncatedFile("checkpoint header truncated")
    g, n_layers = struct.unpack_from("<II", buf, 4)
    if grid is not None and g != grid:
        raise ShapeMismatch(f"checkpoint was trained with grid {g}, expected {grid}")
    off = 12
    if len(buf) < off + 8 * n_layers:
        raise TruncatedFile("checkpoint layer table truncated")
    dims = [struct.unpack_from("<II", buf, off + 8 * k) for k in range(n_layers)]
    off += 8 * n_layers
    need = off + 4 * sum(i * o + o for i, o in dims)
    if len(buf) < need:
        raise TruncatedFile(f"checkpoint needs {need} bytes, has {len(buf)}")
    weights, biases = [], []
    for i, o in dims:
        weights.append(np.frombuffer(buf, "<f4", i * o, off).reshape(o, i).astype(np.float32))
        off += 4 * i * o
    for _, o in dims:
        biases.append(np.frombuffer(buf, "<f4", o, off).astype(np.float32))
        off += 4 * o
    return QNetwork(weights, biases, g)


def save_checkpoint(net: QNetwork, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(net))


def load_checkpoint(path: str | os.PathLike, grid: int | None = None) -> QNetwork:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), grid)

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..tensor import ParamStore


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    weight_decay: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Cosine annealing from lr0 at t=0 to 0 at t=total."""
    if total <= 0:
        return lr0
    t = min(max(t, 0), total)
    return lr0 * (1.0 + math.cos(math.pi * t / total)) / 2.0


def decays(pid: str) -> bool:
    """Weight decay applies to matrices only: not biases, norms, prompts or embeddings."""
    leaf = pid.rsplit(".", 1)[-1]
    return leaf == "weight" or leaf.startswith(("A_", "B_"))


@dataclass
class AdamW:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.1
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, store: ParamStore, lr: float) -> None:
        self.t += 1
        adamw_step(store, self, lr)


def adamw_step(store: ParamStore, state: AdamW, lr: float) -> None:
    """One AdamW update of every trainable parameter, in place.

    Decay is decoupled: w <- w (1 - lr wd) before the Adam step. Parameters
    without a gradient this step are treated as having a zero gradient.
    """
    b1, b2 = state.betas
    t = state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for pid in store.trainable_ids():
        p = store[pid]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(pid)
        if m is None:
            m = state.m[pid] = np.zeros_like(p.data)
            state.v[pid] = np.zeros_like(p.data)
        v = state.v[pid]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and decays(pid):
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)

"""AdamW with decoupled weight decay and a linear-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import NonFiniteError


def linear_decay(step: int, total_steps: int, peak_lr: float) -> float:
    """Learning rate for 0-indexed ``step``: peak at step 0, reaching 0 at ``total_steps``."""
    if total_steps <= 0:
        return peak_lr
    return peak_lr * max(0.0, 1.0 - step / total_steps)


@dataclass
class TrainState:
    peak_lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return linear_decay(self.step, self.total_steps, self.peak_lr)


def optimizer_step(
    state: TrainState,
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    weight_decay: float = 0.0,
) -> float:
    """Apply one AdamW update in place and return the learning rate used."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    lr = state.lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            p -= (lr * weight_decay) * p
        p -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return lr

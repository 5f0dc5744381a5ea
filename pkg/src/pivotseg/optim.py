"""AdamW with decoupled weight decay and a linear-warmup / cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimState:
    total_steps: int
    base_lr: float = 3e-4
    weight_decay: float = 5e-5
    warmup_steps: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = max(1, round(0.1 * self.total_steps))


def lr_at(step: int, state: OptimState) -> float:
    """Linear ramp to ``base_lr`` over the warmup, then cosine decay to zero."""
    w, total, base = state.warmup_steps, state.total_steps, state.base_lr
    if step <= w:
        return base * step / w if w > 0 else base
    span = total - w
    if span <= 0:
        return base
    frac = min(1.0, (step - w) / span)
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


def adamw_step(params, state: OptimState, lr: float | None = None) -> float:
    """Apply one AdamW update in place and return the learning rate used.

    ``state.step`` is advanced first, so the k-th call uses ``lr_at(k)``
    unless ``lr`` is given.
    """
    state.step += 1
    t = state.step
    if lr is None:
        lr = lr_at(t, state)
    b1, b2 = state.betas
    for p in params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r} at step {t}")
        key = p.name
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        denom = np.sqrt(v / (1 - b2**t))
        denom += state.eps
        p.data -= lr * state.weight_decay * p.data
        p.data -= (lr / (1 - b1**t)) * m / denom
    return lr

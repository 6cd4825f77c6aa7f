"""Adam and the warmup-then-cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGrad, OutOfRange, ShapeMismatch
from .tensor import Tensor


@dataclass(frozen=True)
class ScheduleConfig:
    total_iters: int
    peak_lr: float = 1e-3
    final_lr: float = 1e-6
    warmup_iters: int = 200

    def __post_init__(self):
        if not 0 < self.final_lr <= self.peak_lr:
            raise ValueError("need 0 < final_lr <= peak_lr")
        if not 0 < self.warmup_iters < self.total_iters:
            raise ValueError(f"need 0 < warmup_iters ({self.warmup_iters}) < total_iters ({self.total_iters})")


def learning_rate_at(it: int, cfg: ScheduleConfig) -> float:
    """Linear ramp to ``peak_lr`` over the warmup, then a half cosine down to ``final_lr``.

    The ramp starts at ``peak_lr / warmup_iters`` on iteration 0 and reaches the
    peak on iteration ``warmup_iters - 1``; the last iteration lands exactly on
    ``final_lr``.
    """
    if not 0 <= it < cfg.total_iters:
        raise OutOfRange(f"iteration {it} outside [0, {cfg.total_iters})")
    if it < cfg.warmup_iters:
        return cfg.peak_lr * (it + 1) / cfg.warmup_iters
    decay_len = cfg.total_iters - 1 - cfg.warmup_iters
    if decay_len == 0:
        return cfg.final_lr
    progress = (it - cfg.warmup_iters) / decay_len
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> AdamState:
    """One in-place Adam update of ``params``; returns the same (mutated) state."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGrad(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return state

"""Adam with decoupled weight decay, plus step and cosine learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class NonFiniteGradient(ArithmeticError):
    """Raised when a gradient tensor contains NaN or Inf; names the tensor."""


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def init_adam(params) -> AdamState:
    m = {name: np.zeros_like(arr) for name, arr in params.named_trainable()}
    v = {name: np.zeros_like(arr) for name, arr in params.named_trainable()}
    return AdamState(m=m, v=v, step=0)


def adam_step(params, grads, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> None:
    """One in-place update over every trainable tensor.

    Decoupled weight decay shrinks parameters before the Adam delta is
    applied, so the moment buffers see only the data gradient. Frozen
    tensors (the feedback diagonals) are not part of the trainable set and
    are never touched.
    """
    state.step += 1
    t = state.step
    corr1 = 1.0 - BETA1 ** t
    corr2 = 1.0 - BETA2 ** t
    for (name, p), (gname, g) in zip(params.named_trainable(), grads.named_trainable()):
        if name != gname:
            raise ValueError(f"gradient structure mismatch: {name} vs {gname}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in tensor {name}")
        if weight_decay != 0.0:
            p *= 1.0 - lr * weight_decay
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + EPS)


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale all trainable gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, g in grads.named_trainable():
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, g in grads.named_trainable():
            g *= scale
    return norm


@dataclass
class ScheduleConfig:
    kind: str = "step"                    # "step" or "cosine"
    base_lr: float = 1e-3
    milestones: tuple = (10, 20)          # step schedule: decay points
    factor: float = 0.1
    total_steps: int = 0                  # cosine schedule: annealing horizon

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.kind not in ("step", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        self.milestones = tuple(self.milestones)


def lr_at(schedule: ScheduleConfig, position: int) -> float:
    """Learning rate at a schedule position.

    The position unit is whatever the milestones / total horizon were
    declared in; the step schedule is conventionally driven by epoch,
    the cosine one by optimizer step.
    """
    if schedule.kind == "step":
        passed = sum(1 for m in schedule.milestones if position >= m)
        return schedule.base_lr * schedule.factor ** passed
    if schedule.total_steps <= 0:
        raise ValueError("cosine schedule needs total_steps >= 1")
    frac = min(max(position, 0), schedule.total_steps) / schedule.total_steps
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))

"""Adam with decoupled weight decay and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_optim(params: list[Tensor], **kwargs) -> OptimState:
    state = OptimState(**kwargs)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params: list[Tensor], state: OptimState) -> None:
    """One bias-corrected Adam update, in place, using each parameter's ``.grad``."""
    if len(state.m) != len(params):
        raise ContractError("optimizer state was initialized for a different parameter list")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} with shape {p.shape} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: int = 5
    cycle_epochs: int = 50


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Linear warmup from ``base_lr / warmup`` to ``base_lr``, then cosine annealing.

    The cosine part follows the closed form of ``CosineAnnealingLR`` and is
    periodic with period ``2 * cycle_epochs``, so it never leaves
    ``[min_lr, base_lr]``.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    s = schedule
    if s.warmup_epochs > 0 and epoch < s.warmup_epochs:
        return s.base_lr * (epoch + 1) / s.warmup_epochs
    k = epoch - s.warmup_epochs
    cos = math.cos(math.pi * k / s.cycle_epochs) if s.cycle_epochs > 0 else 1.0
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + cos)

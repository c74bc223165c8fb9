"""AdamW with decoupled weight decay, and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    def __init__(self, name: str):
        self.param_name = name
        super().__init__(f"parameter {name!r} has no gradient")


@dataclass
class AdamWState:
    lr_base: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.1
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    # names excluded from weight decay (layer-norm gains, biases, ...)
    no_decay: frozenset[str] = frozenset()


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float) -> None:
    """One AdamW update over ``params`` (name -> Tensor); zeroes grads after."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(name)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        if m.shape != p.data.shape:
            raise ValueError(f"moment buffer for {name!r} has shape {m.shape}, parameter {p.data.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        if state.weight_decay and name not in state.no_decay:
            p.data = p.data - lr * state.weight_decay * p.data
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay to zero."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.base_lr * step / w
    span = schedule.total_steps - w
    if span == 0:
        return schedule.base_lr
    progress = (step - w) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))

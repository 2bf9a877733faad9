"""Optimizers over ParameterSet buffers.

SGD and AdamW (decoupled weight decay) with an optional linear warmup then
linear decay schedule. Both update parameters in place and never touch
frozen buffers.
"""

import logging
import math
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np

from .parameters import GradientSet, ParameterSet, check_congruent

logger = logging.getLogger(__name__)


class OptimizerTag(str, Enum):
    SGD = "sgd"
    ADAMW = "adamw"


class LinearWarmupSchedule:
    """Learning-rate multiplier: linear warmup, then linear decay to zero.

    Without total_steps the multiplier stays at 1 after warmup.
    """

    def __init__(self, warmup_fraction: float = 0.0, total_steps: Optional[int] = None):
        if not 0.0 <= warmup_fraction <= 1.0:
            raise ValueError(
                f"warmup fraction must be in [0, 1], got {warmup_fraction}"
            )
        self.total_steps = total_steps
        self.warmup_steps = 0
        if warmup_fraction > 0 and total_steps:
            self.warmup_steps = max(1, math.ceil(warmup_fraction * total_steps))

    def factor(self, step: int) -> float:
        """Multiplier for the given 0-based step."""
        if step < self.warmup_steps:
            return (step + 1) / self.warmup_steps
        if not self.total_steps:
            return 1.0
        remaining = self.total_steps - step
        span = max(1, self.total_steps - self.warmup_steps)
        return max(0.0, remaining / span)


class Optimizer:
    """Base optimizer: tracks the step count and the schedule."""

    def __init__(self, lr: float, schedule: Optional[LinearWarmupSchedule] = None):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.lr = lr
        self.schedule = schedule or LinearWarmupSchedule()
        self.step_count = 0

    def current_lr(self) -> float:
        return self.lr * self.schedule.factor(self.step_count)

    def step(self, params: ParameterSet, grads: GradientSet) -> None:
        check_congruent(params.named_buffers(), grads)
        self._apply(params, grads, self.current_lr())
        self.step_count += 1

    def _apply(self, params: ParameterSet, grads: GradientSet, lr: float) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Plain gradient descent: p <- p - lr * g."""

    def _apply(self, params: ParameterSet, grads: GradientSet, lr: float) -> None:
        params.axpy_update(grads, lr)


class AdamW(Optimizer):
    """Adam with decoupled weight decay; moments start at zero."""

    def __init__(
        self,
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        schedule: Optional[LinearWarmupSchedule] = None,
    ):
        super().__init__(lr, schedule)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}

    def _apply(self, params: ParameterSet, grads: GradientSet, lr: float) -> None:
        t = self.step_count + 1
        frozen = params.frozen_names()
        for name, value in params.named_buffers().items():
            if name in frozen:
                continue
            grad = grads[name]
            m = self.first_moment.setdefault(name, np.zeros_like(value))
            v = self.second_moment.setdefault(name, np.zeros_like(value))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            value *= 1.0 - lr * self.weight_decay
            value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(
    tag: str,
    lr: float,
    weight_decay: float = 0.01,
    warmup_fraction: float = 0.0,
    total_steps: Optional[int] = None,
) -> Optimizer:
    """Build a fresh optimizer from its config tag.

    Args:
        tag: "sgd" or "adamw"
        lr: Peak learning rate
        weight_decay: AdamW decoupled weight decay
        warmup_fraction: Share of total_steps spent warming up
        total_steps: Length of the schedule (None keeps the rate flat)

    Returns:
        Optimizer: New optimizer with empty state
    """
    schedule = LinearWarmupSchedule(warmup_fraction, total_steps)
    kind = OptimizerTag(tag)
    if kind is OptimizerTag.SGD:
        return SGD(lr, schedule)
    return AdamW(lr, weight_decay=weight_decay, schedule=schedule)

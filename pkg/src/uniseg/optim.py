"""AdamW with decoupled weight decay, and the one-cycle learning-rate policy.

The schedule ramps linearly from max_lr/div_factor up to max_lr over the
first pct_start of training, then anneals linearly down to
max_lr/final_div_factor at the last step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ParameterSet


class AdamW:
    """Decoupled-weight-decay Adam.

    Per step: m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2, bias-corrected
    m_hat/v_hat, then w <- w - lr*m_hat/(sqrt(v_hat)+eps) - lr*wd*w. Decay
    applies to all parameters, biases included.
    """

    def __init__(
        self,
        params: ParameterSet,
        lr: float = 1e-4,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def zero_grad(self):
        self.params.zero_grad()

    def step(self, lr: float | None = None):
        """Apply one update using each parameter's accumulated gradient.

        A missing gradient counts as zero (the weight-decay term still
        applies). Non-finite gradients abort, naming the parameter.
        """
        lr_now = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}"
                )
            elif not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr_now * update + lr_now * self.weight_decay * p.data


def adamw_step(optimizer: AdamW, lr_now: float | None = None):
    """Functional alias for one optimizer step at an explicit rate."""
    optimizer.step(lr=lr_now)


@dataclass
class OneCycleSchedule:
    max_lr: float
    total_steps: int
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if self.total_steps < 2:
            raise ValueError(f"total_steps must be >= 2, got {self.total_steps}")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError(f"pct_start must be in (0, 1), got {self.pct_start}")
        if self.max_lr <= 0 or self.div_factor <= 0 or self.final_div_factor <= 0:
            raise ValueError("max_lr and div factors must be positive")

    @property
    def peak_step(self) -> int:
        return max(1, min(self.total_steps - 1, round(self.pct_start * self.total_steps)))


def one_cycle_lr(schedule: OneCycleSchedule, step: int) -> float:
    """Learning rate at an integer step in [0, total_steps)."""
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    peak = schedule.peak_step
    initial = schedule.max_lr / schedule.div_factor
    final = schedule.max_lr / schedule.final_div_factor
    if step <= peak:
        return initial + (schedule.max_lr - initial) * (step / peak)
    tail = schedule.total_steps - 1 - peak
    return schedule.max_lr + (final - schedule.max_lr) * ((step - peak) / tail)

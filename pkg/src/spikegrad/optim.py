"""AdamW and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ContractError, DimensionError, TrainingError


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Iterable, state: OptimizerState, lr: float, weight_decay: float = 0.01) -> None:
    """One AdamW update in place over ``(name, tensor)`` pairs, using each tensor's ``grad``.

    Weight decay is decoupled: ``p *= 1 - lr * weight_decay`` before the
    bias-corrected Adam step. A missing grad counts as zero.
    """
    params = list(params)
    for name, p in params:
        g = p.grad
        if g is not None:
            if g.shape != p.data.shape:
                raise DimensionError(f"gradient of {name} has shape {g.shape}, parameter {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        data = p.data
        dt = data.dtype.type
        g = p.grad if p.grad is not None else np.zeros_like(data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(data)
            v = np.zeros_like(data)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        if weight_decay:
            data *= dt(1.0 - lr * weight_decay)
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        data -= dt(lr) * update


def one_cycle_lr(step: int, total_steps: int, max_lr: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 100.0) -> float:
    """Linear warm-up from max_lr/div to max_lr, then cosine decay to max_lr/(div*final_div).

    Steps past ``total_steps`` return the final value.
    """
    if total_steps < 1:
        raise ContractError("total_steps must be >= 1")
    if step < 0:
        raise ContractError("step must be >= 0")
    start = max_lr / div_factor
    end = start / final_div_factor
    step = min(step, total_steps)
    peak = pct_start * total_steps
    if step <= peak:
        if peak == 0:
            return max_lr
        return start + (max_lr - start) * step / peak
    frac = (step - peak) / (total_steps - peak)
    return end + (max_lr - end) * 0.5 * (1.0 + math.cos(math.pi * frac))

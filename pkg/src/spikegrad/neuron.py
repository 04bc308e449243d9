"""Integrate-and-fire dynamics with a surrogate-gradient spike nonlinearity."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, custom_node, mul, sub, add, scale

RESET_MODES = ("hard", "soft")


@dataclass
class NeuronConfig:
    """Threshold, reset rule and surrogate shape of one spiking layer.

    ``beta`` is the surrogate height at threshold, ``gamma`` its inverse width.
    """

    threshold: float = 1.0
    reset_mode: str = "soft"
    beta: float = 1.0
    gamma: float = 10.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.threshold > 0:
            raise ContractError(f"threshold must be > 0, got {self.threshold}")
        if not self.beta > 0:
            raise ContractError(f"beta must be > 0, got {self.beta}")
        if not self.gamma >= 0:
            raise ContractError(f"gamma must be >= 0, got {self.gamma}")
        if self.reset_mode not in RESET_MODES:
            raise ContractError(f"reset_mode must be one of {RESET_MODES}, got {self.reset_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def surrogate(u, threshold: float, beta: float, gamma: float):
    """beta * (1 + |gamma (u - threshold)|)^-2 on raw arrays."""
    u = np.asarray(u)
    dt = u.dtype if np.issubdtype(u.dtype, np.floating) else np.float64
    z = 1.0 + np.abs(dt.type(gamma) * (u - dt.type(threshold)))
    return dt.type(beta) / (z * z)


def surrogate_grad(u, cfg: NeuronConfig) -> Tensor:
    data = u.data if isinstance(u, Tensor) else np.asarray(u)
    return Tensor._wrap(surrogate(data, cfg.threshold, cfg.beta, cfg.gamma))


def spike(u: Tensor, cfg: NeuronConfig) -> Tensor:
    """Heaviside(u > threshold) whose backward multiplies upstream by the surrogate at u."""
    u = as_tensor(u)
    ud = u.data
    return custom_node(
        u,
        lambda x: (x > cfg.threshold).astype(x.dtype),
        lambda g: g * surrogate(ud, cfg.threshold, cfg.beta, cfg.gamma),
        name="spike",
    )


def if_step(u_prev, input_current, cfg: NeuronConfig):
    """One discrete IF update. Returns ``(spike, u_next)``.

    The spike used inside the reset is a constant, so the reset path carries
    no gradient: hard reset passes ``1 - s`` back in time, soft reset passes 1.
    """
    u_prev, input_current = as_tensor(u_prev), as_tensor(input_current)
    if u_prev.shape != input_current.shape:
        raise DimensionError(f"potential {u_prev.shape} and current {input_current.shape} differ in shape")
    u_t = add(u_prev, input_current)
    s = spike(u_t, cfg)
    s_const = s.detach()
    if cfg.reset_mode == "hard":
        u_next = mul(u_t, 1.0 - s_const.data)
    else:
        u_next = sub(u_t, scale(s_const, cfg.threshold))
    return s, u_next


class IFRecord:
    """Pre-reset potentials of a fused IF layer and, after backward, dL/du."""

    def __init__(self, potentials: np.ndarray):
        self.potentials = potentials
        self.potential_grads: Optional[np.ndarray] = None


def integrate_fire(currents, cfg: NeuronConfig):
    """Run an IF layer over a ``T×...`` current sequence as one tape node.

    Equivalent to chaining :func:`if_step` over time from ``u = 0`` (the
    backward pass is the same BPTT recursion, done in a single sweep).
    Returns ``(spikes, record)``.
    """
    currents = as_tensor(currents)
    if currents.ndim < 1 or currents.shape[0] < 1:
        raise ContractError("integrate_fire needs at least one timestep")
    I = currents.data
    dtype = I.dtype.type
    th = dtype(cfg.threshold)
    hard = cfg.reset_mode == "hard"
    potentials = np.empty_like(I)
    spikes = np.empty_like(I)
    u = np.zeros_like(I[0])
    for t in range(I.shape[0]):
        u = u + I[t]
        potentials[t] = u
        s = (u > th).astype(I.dtype)
        spikes[t] = s
        u = u * (dtype(1) - s) if hard else u - th * s
    record = IFRecord(potentials)

    def grad_fn(g):
        fu = surrogate(potentials, cfg.threshold, cfg.beta, cfg.gamma)
        dI = np.empty_like(g)
        carry = np.zeros_like(g[0])
        for t in range(g.shape[0] - 1, -1, -1):
            if hard:
                carry = carry * (dtype(1) - spikes[t])
            carry = fu[t] * g[t] + carry
            dI[t] = carry
        if record.potential_grads is None:
            record.potential_grads = dI.copy()
        else:
            record.potential_grads = record.potential_grads + dI
        return (dI,)

    out = custom_node(currents, lambda x: spikes, grad_fn, name="integrate_fire")
    return out, record

"""Spike-train losses for single neurons and the classification loss on output currents.

Time is discrete, so every integral over ``[0, T]`` becomes a sum over steps.
Spike trains enter the single-neuron losses as constants; the gradient flows
only through the membrane potential trace.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, custom_node, heaviside_detached, matmul, mul, sum_over_axes


def _const(x, dtype) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)


def energy_loss(spikes, target, potentials) -> Tensor:
    """Sum over steps of (S - S_gt) * U: the energy of the error current."""
    U = as_tensor(potentials)
    S, S_gt = _const(spikes, U.dtype), _const(target, U.dtype)
    if not S.shape == S_gt.shape == U.shape:
        raise DimensionError(f"spikes {S.shape}, target {S_gt.shape} and potentials {U.shape} must match")
    return sum_over_axes(mul(U, S - S_gt))


def causal_kernel_matrix(kernel, timesteps: int, dtype=np.float64) -> np.ndarray:
    """Lower-triangular Toeplitz matrix A with (A @ X)_t = sum_{t'<=t} kernel[t - t'] X_{t'}."""
    kernel = np.asarray(kernel, dtype=dtype).reshape(-1)
    if kernel.size < 1 or not np.all(np.isfinite(kernel)):
        raise ContractError("kernel must be non-empty and finite")
    if kernel.size > timesteps:
        raise ContractError(f"kernel length {kernel.size} exceeds {timesteps} timesteps")
    A = np.zeros((timesteps, timesteps), dtype=dtype)
    for lag, value in enumerate(kernel):
        A += value * np.eye(timesteps, k=-lag, dtype=dtype)
    return A


def convolved_energy_loss(spikes, target, potentials, kernel) -> Tensor:
    """van Rossum style loss: sum_t [(a*S)_t - (a*S_gt)_t] (a*U)_t with causal kernel a."""
    U = as_tensor(potentials)
    S, S_gt = _const(spikes, U.dtype), _const(target, U.dtype)
    if not S.shape == S_gt.shape == U.shape:
        raise DimensionError(f"spikes {S.shape}, target {S_gt.shape} and potentials {U.shape} must match")
    T = U.shape[0]
    A = causal_kernel_matrix(kernel, T, U.dtype)
    flat = (T, -1)
    err = A @ (S - S_gt).reshape(flat)
    filtered_u = matmul(Tensor._wrap(A), U.reshape(flat))
    return sum_over_axes(mul(filtered_u, err))


def count_threshold_loss(spikes, label: int, potentials, count_threshold: float = 0.0) -> Tensor:
    """(Theta(Y) - Y_gt) * sum_t U_t with Y the spike count of a single output neuron.

    Theta(Y) is 1 when ``Y > count_threshold`` and carries no gradient.
    """
    if label not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {label!r}")
    U = as_tensor(potentials)
    S = _const(spikes, U.dtype)
    if S.shape != U.shape:
        raise DimensionError(f"spikes {S.shape} and potentials {U.shape} must match")
    if U.ndim > 1 and int(np.prod(U.shape[1:])) != 1:
        raise DimensionError("count_threshold_loss expects a single output neuron")
    fired = heaviside_detached(S.sum(), count_threshold).item()
    return mul(sum_over_axes(U), fired - label)


def cross_entropy(logits, labels) -> Tensor:
    """Batch-mean softmax cross-entropy on summed output currents."""
    z = as_tensor(logits)
    if z.ndim != 2:
        raise DimensionError(f"logits must be batch×classes, got {z.shape}")
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    n, c = z.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} logits")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    zd = z.data
    shifted = zd - zd.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    def grad_fn(g):
        d = np.exp(log_probs)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return custom_node(z, lambda _: np.asarray(loss, dtype=zd.dtype), grad_fn, name="cross_entropy")


cross_entropy_on_summed_currents = cross_entropy

"""Batch normalization of input currents and threshold calibration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, custom_node, get_default_dtype, no_grad

if TYPE_CHECKING:
    from .data import Dataset
    from .network import Network

THRESHOLD_FLOOR = 1e-3


@dataclass
class BatchNormState:
    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True
    weight: Tensor = field(default=None)
    bias: Tensor = field(default=None)
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        dtype = get_default_dtype()
        if self.weight is None:
            self.weight = Tensor(np.ones(self.channels), requires_grad=True)
        if self.bias is None:
            self.bias = Tensor(np.zeros(self.channels), requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=dtype)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=dtype)


def batchnorm_currents(currents, state: BatchNormState, channel_axis: int) -> Tensor:
    """Normalize each channel of ``currents`` and apply the learned affine map.

    In training mode the statistics pool every axis except ``channel_axis``
    (time, batch and spatial positions together) and the running estimates
    are updated. In eval mode the running estimates are used.
    """
    x = as_tensor(currents)
    ax = channel_axis % x.ndim
    c = x.shape[ax]
    if c != state.channels:
        raise DimensionError(f"batch norm has {state.channels} channels, input has {c} on axis {ax}")
    if x.size == 0:
        raise ContractError("batch norm on an empty batch")
    reduce_axes = tuple(i for i in range(x.ndim) if i != ax)
    bshape = [1] * x.ndim
    bshape[ax] = c
    bshape = tuple(bshape)
    xd = x.data
    dtype = xd.dtype.type
    eps = dtype(state.eps)
    w = state.weight.data.reshape(bshape)
    b = state.bias.data.reshape(bshape)

    if state.training:
        n = xd.size // c
        mu = xd.mean(axis=reduce_axes, keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=reduce_axes, keepdims=True)
        inv_std = dtype(1) / np.sqrt(var + eps)
        xhat = centered * inv_std
        m = dtype(state.momentum)
        unbiased = var.reshape(c) * dtype(n / max(n - 1, 1))
        state.running_mean = ((dtype(1) - m) * state.running_mean + m * mu.reshape(c)).astype(dtype)
        state.running_var = ((dtype(1) - m) * state.running_var + m * unbiased).astype(dtype)

        def grad_fn(g):
            dw = (g * xhat).sum(axis=reduce_axes)
            db = g.sum(axis=reduce_axes)
            dxhat = g * w
            dx = (inv_std / dtype(n)) * (
                dtype(n) * dxhat
                - dxhat.sum(axis=reduce_axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=reduce_axes, keepdims=True)
            )
            return dx, dw, db
    else:
        inv_std = dtype(1) / np.sqrt(state.running_var.reshape(bshape).astype(xd.dtype) + eps)
        xhat = (xd - state.running_mean.reshape(bshape).astype(xd.dtype)) * inv_std

        def grad_fn(g):
            return g * w * inv_std, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    out = xhat * w + b
    return custom_node((x, state.weight, state.bias), lambda *_: out, grad_fn, name="batchnorm")


def normalize_thresholds(net: "Network", dataset: "Dataset", timesteps: int,
                         batch_size: int = 64, max_samples: Optional[int] = None) -> list[float]:
    """Set each spiking layer's threshold to the largest input current it receives.

    Layers are calibrated front to back, so a layer's maximum is measured with
    all earlier thresholds already fixed. Returns the new thresholds.
    """
    if net.has_batchnorm():
        raise ContractError("threshold normalization applies to networks without batch norm")
    images = dataset.images if max_samples is None else dataset.images[:max_samples]
    if len(images) == 0:
        raise ContractError("threshold normalization needs a non-empty dataset")
    was_training = net.training
    net.eval()
    thresholds = []
    try:
        with no_grad():
            for k in range(net.num_spiking):
                peak = -np.inf
                for lo in range(0, len(images), batch_size):
                    _, trace = net.forward(images[lo:lo + batch_size], timesteps, stop_at_spiking=k)
                    peak = max(peak, float(trace.spiking[k].currents.data.max()))
                value = max(peak, THRESHOLD_FLOOR)
                net.set_threshold(k, value)
                thresholds.append(net.threshold(k))
    finally:
        net.train(was_training)
    return thresholds

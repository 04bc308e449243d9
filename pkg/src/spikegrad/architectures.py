"""Built-in network topologies, addressable by name from the CLI."""

from __future__ import annotations

from typing import Optional

from .errors import ContractError
from .network import (
    AvgPool,
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    NetworkSpec,
    OutputAccumulator,
    Spiking,
)
from .neuron import NeuronConfig

SCALING_DEPTHS = (3, 4, 5, 9, 13)


def _neuron(reset_mode: str, gamma: float) -> NeuronConfig:
    return NeuronConfig(threshold=1.0, reset_mode=reset_mode, beta=1.0, gamma=gamma)


def mnist_2conv(input_shape=(1, 28, 28), num_classes: int = 10, batchnorm: bool = False,
                reset_mode: str = "soft", gamma: float = 10.0, dropout: float = 0.5) -> NetworkSpec:
    """conv32 5×5 → pool → conv64 5×5 → pool → fc1024 → dropout → fc(classes).

    Convolutions use 'same' padding, so a 28×28 input reaches the dense layer as 64×7×7.
    """
    c, h, w = input_shape
    layers = []

    def spiking_block(source, channels):
        layers.append(source)
        if batchnorm:
            layers.append(BatchNorm(channels))
        layers.append(Spiking(_neuron(reset_mode, gamma)))

    spiking_block(Conv2d(c, 32, 5, 1, 2), 32)
    layers.append(AvgPool(2))
    spiking_block(Conv2d(32, 64, 5, 1, 2), 64)
    layers.append(AvgPool(2))
    layers.append(Flatten())
    spiking_block(Dense(64 * (h // 4) * (w // 4), 1024), 1024)
    layers.append(Dropout(dropout))
    layers += [Dense(1024, num_classes), OutputAccumulator()]
    return NetworkSpec(layers, input_shape, "mnist-2conv")


def scaling_plan(depth: int) -> list[tuple[int, int]]:
    """(out_channels, stride) for every conv layer of the ``scaling-<depth>`` family."""
    if depth not in SCALING_DEPTHS:
        raise ContractError(f"scaling depth must be one of {SCALING_DEPTHS}, got {depth}")
    if depth <= 5:
        strides = [2] * (depth - 1)
    else:
        per_block = 2 if depth == 9 else 3
        strides = ([2] + [1] * (per_block - 1)) * 4
    plan, channels = [], 16
    for stride in strides:
        if stride == 2:
            channels *= 2
        plan.append((channels, stride))
    return plan


def scaling(depth: int, input_shape=(3, 32, 32), num_classes: int = 100, batchnorm: bool = True,
            reset_mode: str = "hard", gamma: float = 10.0) -> NetworkSpec:
    """Plain conv classifier with ``depth - 1`` 3×3 conv layers and one dense readout.

    Channels start at 32 and double at every stride-2 convolution.
    """
    c = input_shape[0]
    layers = []
    for out_channels, stride in scaling_plan(depth):
        layers.append(Conv2d(c, out_channels, 3, stride, 1))
        if batchnorm:
            layers.append(BatchNorm(out_channels))
        layers.append(Spiking(_neuron(reset_mode, gamma)))
        c = out_channels
    layers.append(Flatten())
    spatial = _spatial_after(input_shape, scaling_plan(depth))
    layers += [Dense(c * spatial[0] * spatial[1], num_classes), OutputAccumulator()]
    return NetworkSpec(layers, input_shape, f"scaling-{depth}")


def _spatial_after(input_shape, plan) -> tuple[int, int]:
    h, w = input_shape[1:]
    for _, stride in plan:
        h = (h + 2 - 3) // stride + 1
        w = (w + 2 - 3) // stride + 1
    return h, w


def deep_dense(depth: int = 16, input_features: int = 64, width: int = 128, num_classes: int = 10,
               batchnorm: bool = True, reset_mode: str = "hard", gamma: float = 10.0) -> NetworkSpec:
    """``depth`` × (dense → [batchnorm] → spiking) followed by a dense readout."""
    layers = [Flatten()]
    fan_in = input_features
    for _ in range(depth):
        layers.append(Dense(fan_in, width))
        if batchnorm:
            layers.append(BatchNorm(width))
        layers.append(Spiking(_neuron(reset_mode, gamma)))
        fan_in = width
    layers += [Dense(width, num_classes), OutputAccumulator()]
    return NetworkSpec(layers, (input_features, 1, 1), f"deep{depth}")


def build(name: str, input_shape, num_classes: int, batchnorm: Optional[bool] = None,
          reset_mode: Optional[str] = None, gamma: float = 10.0) -> NetworkSpec:
    """Resolve an architecture name (``mnist-2conv``, ``scaling-N``, ``deep16``)."""
    input_shape = tuple(input_shape)
    if name == "mnist-2conv":
        return mnist_2conv(input_shape, num_classes, bool(batchnorm), reset_mode or "soft", gamma)
    if name.startswith("scaling-"):
        depth = int(name.split("-", 1)[1])
        return scaling(depth, input_shape, num_classes, True if batchnorm is None else batchnorm,
                       reset_mode or "hard", gamma)
    if name.startswith("deep") and name[4:].isdigit():
        features = 1
        for s in input_shape:
            features *= s
        spec = deep_dense(int(name[4:]), features, 128, num_classes,
                          True if batchnorm is None else batchnorm, reset_mode or "hard", gamma)
        spec.input_shape = input_shape
        spec.validate()
        return spec
    raise ContractError(f"unknown architecture {name!r}")

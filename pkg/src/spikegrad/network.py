"""Layer descriptions and the time-unrolled network executor.

Execution is layer-major: each layer processes all ``T`` timesteps before the
next one runs. Because the network is feed-forward with no synaptic delay,
this produces exactly the same values as stepping the whole network through
time, and lets dense/conv layers batch over ``T×N``.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError
from .neuron import IFRecord, NeuronConfig, if_step, integrate_fire
from .normalization import BatchNormState, batchnorm_currents
from .tensor import (
    Tensor,
    avgpool2d,
    conv2d,
    conv_output_size,
    matmul,
    mul,
    repeat_leading,
    reshape,
    stack,
    sum_over_axes,
)


@dataclass
class Dense:
    in_features: int
    out_features: int
    kind: str = field(default="dense", init=False)


@dataclass
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind: str = field(default="conv2d", init=False)


@dataclass
class AvgPool:
    window: int
    kind: str = field(default="avgpool", init=False)


@dataclass
class BatchNorm:
    channels: int
    kind: str = field(default="batchnorm", init=False)


@dataclass
class Dropout:
    p: float = 0.5
    kind: str = field(default="dropout", init=False)


@dataclass
class Spiking:
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    kind: str = field(default="spiking", init=False)


@dataclass
class Flatten:
    kind: str = field(default="flatten", init=False)


@dataclass
class OutputAccumulator:
    kind: str = field(default="output", init=False)


Layer = Union[Dense, Conv2d, AvgPool, BatchNorm, Dropout, Spiking, Flatten, OutputAccumulator]
_KINDS = {cls.__dataclass_fields__["kind"].default: cls
          for cls in (Dense, Conv2d, AvgPool, BatchNorm, Dropout, Spiking, Flatten, OutputAccumulator)}
_CURRENT_SOURCES = (Dense, Conv2d, BatchNorm)


@dataclass
class NetworkSpec:
    """Ordered layer list plus the per-sample input shape (without batch axis)."""

    layers: list
    input_shape: tuple
    name: str = "custom"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    def validate(self) -> None:
        outputs = [i for i, l in enumerate(self.layers) if isinstance(l, OutputAccumulator)]
        if outputs != [len(self.layers) - 1]:
            raise ContractError("network needs exactly one output accumulator, as the last layer")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Spiking):
                if i == 0 or not isinstance(self.layers[i - 1], _CURRENT_SOURCES):
                    raise ContractError(f"spiking layer {i} must follow a dense, conv or batchnorm layer")
            if isinstance(layer, Dropout) and not 0 <= layer.p < 1:
                raise ContractError(f"dropout p must lie in [0, 1), got {layer.p}")
        self.shapes()

    def shapes(self) -> list[tuple]:
        """Per-sample output shape of every layer; raises on inconsistent geometry."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if len(shape) != 1 or shape[0] != layer.in_features:
                    raise DimensionError(f"layer {i}: dense expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise DimensionError(f"layer {i}: conv expects {layer.in_channels} channels, got {shape}")
                h = conv_output_size(shape[1], layer.kernel, layer.stride, layer.padding)
                w = conv_output_size(shape[2], layer.kernel, layer.stride, layer.padding)
                if h < 1 or w < 1:
                    raise DimensionError(f"layer {i}: conv output would be empty for input {shape}")
                shape = (layer.out_channels, h, w)
            elif isinstance(layer, AvgPool):
                if len(shape) != 3 or shape[1] % layer.window or shape[2] % layer.window:
                    raise DimensionError(f"layer {i}: {shape} not divisible by pool window {layer.window}")
                shape = (shape[0], shape[1] // layer.window, shape[2] // layer.window)
            elif isinstance(layer, BatchNorm):
                if shape[0] != layer.channels:
                    raise DimensionError(f"layer {i}: batchnorm has {layer.channels} channels, input {shape}")
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            out.append(shape)
        return out

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    def spiking_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Spiking)]

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                shapes[f"{i}.weight"] = (layer.in_features, layer.out_features)
            elif isinstance(layer, Conv2d):
                shapes[f"{i}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            elif isinstance(layer, BatchNorm):
                for key in ("weight", "bias", "running_mean", "running_var"):
                    shapes[f"{i}.{key}"] = (layer.channels,)
        return shapes

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = entry.pop("kind")
            if kind not in _KINDS:
                raise ContractError(f"unknown layer kind {kind!r}")
            if kind == "spiking":
                entry["neuron"] = NeuronConfig(**entry["neuron"])
            layers.append(_KINDS[kind](**entry))
        return cls(layers, tuple(d["input_shape"]), d.get("name", "custom"))


@dataclass
class SpikingRecord:
    """Per-timestep quantities of one spiking layer from one forward pass."""

    layer_index: int
    name: str
    currents: Tensor
    spikes: Tensor
    _if: Optional[IFRecord] = None
    _steps: Optional[list] = None

    @property
    def potentials(self) -> np.ndarray:
        """Pre-reset membrane potentials, shape ``T×N×...``."""
        if self._if is not None:
            return self._if.potentials
        return np.stack([u.data for u in self._steps])

    @property
    def potential_grads(self) -> Optional[np.ndarray]:
        """dL/du at each pre-reset potential (filled in by backward)."""
        if self._if is not None:
            return self._if.potential_grads
        if any(u.grad is None for u in self._steps):
            return None
        return np.stack([u.grad for u in self._steps])

    @property
    def spike_grads(self) -> Optional[np.ndarray]:
        return self.spikes.grad


@dataclass
class Trace:
    timesteps: int
    spiking: list = field(default_factory=list)
    output_currents: Optional[Tensor] = None


def kaiming_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Network:
    """Parameters and runtime state for a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, gamma: Optional[float] = None):
        self.spec = spec
        self.seed = seed
        self.training = True
        self.params: dict[str, Tensor] = {}
        self.bn: dict[int, BatchNormState] = {}
        self.neurons: dict[int, NeuronConfig] = {}
        init_seq, dropout_seq = np.random.SeedSequence(seed).spawn(2)
        init_rng = np.random.default_rng(init_seq)
        self.dropout_rng = np.random.default_rng(dropout_seq)
        for i, layer in enumerate(spec.layers):
            if isinstance(layer, Dense):
                w = kaiming_normal(init_rng, (layer.in_features, layer.out_features), layer.in_features)
                self.params[f"{i}.weight"] = Tensor(w, requires_grad=True, name=f"{i}.weight")
            elif isinstance(layer, Conv2d):
                shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                w = kaiming_normal(init_rng, shape, layer.in_channels * layer.kernel ** 2)
                self.params[f"{i}.weight"] = Tensor(w, requires_grad=True, name=f"{i}.weight")
            elif isinstance(layer, BatchNorm):
                state = BatchNormState(layer.channels)
                state.weight.name, state.bias.name = f"{i}.weight", f"{i}.bias"
                self.bn[i] = state
                self.params[f"{i}.weight"] = state.weight
                self.params[f"{i}.bias"] = state.bias
            elif isinstance(layer, Spiking):
                self.neurons[i] = copy.deepcopy(layer.neuron)
        if gamma is not None:
            self.set_gamma(gamma)

    # -- modes and neuron state -------------------------------------------------

    def train(self, mode: bool = True) -> "Network":
        self.training = mode
        for state in self.bn.values():
            state.training = mode
        return self

    def eval(self) -> "Network":
        return self.train(False)

    def has_batchnorm(self) -> bool:
        return bool(self.bn)

    @property
    def num_spiking(self) -> int:
        return len(self.neurons)

    def spiking_layer(self, k: int) -> int:
        indices = sorted(self.neurons)
        if not 0 <= k < len(indices):
            raise ContractError(f"spiking layer {k} out of range (network has {len(indices)})")
        return indices[k]

    def threshold(self, k: int) -> float:
        return self.neurons[self.spiking_layer(k)].threshold

    def set_threshold(self, k: int, value: float) -> None:
        cfg = self.neurons[self.spiking_layer(k)]
        cfg.threshold = float(value)
        cfg.validate()

    @property
    def thresholds(self) -> list[float]:
        return [self.neurons[i].threshold for i in sorted(self.neurons)]

    @property
    def gamma(self) -> Optional[float]:
        values = {cfg.gamma for cfg in self.neurons.values()}
        return values.pop() if len(values) == 1 else None

    def set_gamma(self, gamma: float) -> None:
        for cfg in self.neurons.values():
            cfg.gamma = float(gamma)
            cfg.validate()

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def reseed_dropout(self, seed) -> None:
        self.dropout_rng = np.random.default_rng(seed)

    # -- state --------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every persistent array (parameters and BN running statistics) by name."""
        out = {name: p.data for name, p in self.params.items()}
        for i, state in self.bn.items():
            out[f"{i}.running_mean"] = state.running_mean
            out[f"{i}.running_var"] = state.running_var
        return dict(sorted(out.items(), key=lambda kv: _name_key(kv[0])))

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            idx, key = name.split(".", 1)
            i = int(idx)
            if key in ("running_mean", "running_var"):
                setattr(self.bn[i], key, np.array(value, dtype=self.bn[i].running_mean.dtype))
            else:
                p = self.params[name]
                p.data = np.array(value, dtype=p.data.dtype)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    # -- forward ------------------------------------------------------------------

    def forward(self, images, timesteps: int, *, fused: bool = True,
                stop_at_spiking: Optional[int] = None):
        """Unroll the network for ``timesteps`` steps on a batch of images.

        The images are injected as a constant current at every step. Returns
        ``(logits, trace)`` where logits are the final layer's input currents
        summed over time, shape ``N×classes``.
        """
        if timesteps < 1:
            raise ContractError(f"timesteps must be >= 1, got {timesteps}")
        x = images if isinstance(images, Tensor) else Tensor(images)
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise DimensionError(f"input shape {x.shape[1:]} does not match network input {self.spec.input_shape}")
        T = timesteps
        n = x.shape[0]
        trace = Trace(T)
        timed = False  # whether x carries the leading time axis

        def apply_flat(t: Tensor, fn):
            if not timed:
                return fn(t)
            lead = t.shape[:2]
            y = fn(reshape(t, (lead[0] * lead[1],) + t.shape[2:]))
            return reshape(y, lead + y.shape[1:])

        for i, layer in enumerate(self.spec.layers):
            if isinstance(layer, Dense):
                w = self.params[f"{i}.weight"]
                x = apply_flat(x, lambda t: matmul(t, w))
                if not timed:
                    x, timed = repeat_leading(x, T), True
            elif isinstance(layer, Conv2d):
                w = self.params[f"{i}.weight"]
                x = apply_flat(x, lambda t: conv2d(t, w, layer.stride, layer.padding))
                if not timed:
                    x, timed = repeat_leading(x, T), True
            elif isinstance(layer, AvgPool):
                x = avgpool2d(x, layer.window)
            elif isinstance(layer, Flatten):
                keep = 2 if timed else 1
                x = reshape(x, x.shape[:keep] + (-1,))
            elif isinstance(layer, BatchNorm):
                x = batchnorm_currents(x, self.bn[i], channel_axis=2 if timed else 1)
            elif isinstance(layer, Dropout):
                if self.training and layer.p > 0:
                    keep_mask = self.dropout_rng.random((n,) + x.shape[2 if timed else 1:]) >= layer.p
                    x = mul(x, (keep_mask / (1.0 - layer.p)).astype(x.data.dtype))
            elif isinstance(layer, Spiking):
                if not timed:
                    x, timed = repeat_leading(x, T), True
                cfg = self.neurons[i]
                currents = x
                if fused:
                    x, rec = integrate_fire(currents, cfg)
                    record = SpikingRecord(i, f"spiking{len(trace.spiking)}", currents, x, _if=rec)
                else:
                    x, steps = _unrolled_if(currents, cfg)
                    record = SpikingRecord(i, f"spiking{len(trace.spiking)}", currents, x, _steps=steps)
                trace.spiking.append(record)
                if stop_at_spiking is not None and len(trace.spiking) > stop_at_spiking:
                    return None, trace
            elif isinstance(layer, OutputAccumulator):
                if not timed:
                    x, timed = repeat_leading(x, T), True
                trace.output_currents = x
                x = sum_over_axes(x, axis=0)
        if stop_at_spiking is not None:
            raise ContractError(f"spiking layer {stop_at_spiking} out of range")
        return x, trace


def _unrolled_if(currents: Tensor, cfg: NeuronConfig):
    """Reference IF layer built from per-step tape operations."""
    u = Tensor._wrap(np.zeros_like(currents.data[0]))
    spikes, potentials = [], []
    for t in range(currents.shape[0]):
        u_t = u + currents[t]
        potentials.append(u_t)
        # if_step adds its own input; feed the already-summed potential with zero current
        s, u = if_step(u_t, Tensor._wrap(np.zeros_like(u_t.data)), cfg)
        spikes.append(s)
    return stack(spikes), potentials


def _name_key(name: str):
    idx, key = name.split(".", 1)
    return int(idx), key


def unroll_forward(net: Network, input_image, timesteps: int, **kwargs):
    return net.forward(input_image, timesteps, **kwargs)


def firing_rate(trace: Trace, layer: int) -> float:
    """Mean spike value of spiking layer ``layer`` over time, batch and neurons."""
    if not 0 <= layer < len(trace.spiking):
        raise ContractError(f"trace has no spiking layer {layer}")
    return float(trace.spiking[layer].spikes.data.mean())

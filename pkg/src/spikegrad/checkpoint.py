"""Single-file model checkpoints.

Layout (all integers little-endian)::

    b"SPKGCKPT"  u32 version  u32 header_len  header (UTF-8 JSON)
    per tensor:  u16 name_len  name  u8 ndim  u32 dims[ndim]  float32 data

The JSON header holds the topology, thresholds, gamma, training metadata,
optimizer scalars and the ordered tensor names. Keys are sorted and floats
use shortest round-trip repr, so save → load → save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError, CorruptHeaderError, ShapeMismatchError, TopologyError, VersionMismatchError
from .network import Network, NetworkSpec
from .optim import OptimizerState

MAGIC = b"SPKGCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    spec: NetworkSpec
    arrays: dict
    thresholds: list
    gamma: Optional[float]
    metadata: dict = field(default_factory=dict)
    optimizer: Optional[OptimizerState] = None

    @classmethod
    def from_network(cls, net: Network, metadata: Optional[dict] = None,
                     optimizer: Optional[OptimizerState] = None) -> "Checkpoint":
        arrays = {k: np.array(v, dtype=np.float32) for k, v in net.state_arrays().items()}
        opt = None
        if optimizer is not None:
            opt = OptimizerState(optimizer.beta1, optimizer.beta2, optimizer.eps, optimizer.step,
                                 {k: np.array(v, dtype=np.float32) for k, v in optimizer.m.items()},
                                 {k: np.array(v, dtype=np.float32) for k, v in optimizer.v.items()})
        return cls(net.spec, arrays, [float(t) for t in net.thresholds], net.gamma,
                   dict(metadata or {}), opt)

    def to_network(self) -> Network:
        net = Network(NetworkSpec.from_dict(self.spec.to_dict()), seed=int(self.metadata.get("seed", 0)))
        net.load_state_arrays(self.arrays)
        for k, th in enumerate(self.thresholds):
            net.set_threshold(k, th)
        if self.gamma is not None:
            net.set_gamma(self.gamma)
        return net


def _header(ckpt: Checkpoint) -> dict:
    opt = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt = {"beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "step": o.step}
    names = list(ckpt.arrays)
    if ckpt.optimizer is not None:
        names += [f"opt.m.{k}" for k in ckpt.optimizer.m] + [f"opt.v.{k}" for k in ckpt.optimizer.v]
    return {
        "spec": ckpt.spec.to_dict(),
        "thresholds": [float(t) for t in ckpt.thresholds],
        "gamma": None if ckpt.gamma is None else float(ckpt.gamma),
        "metadata": ckpt.metadata,
        "optimizer": opt,
        "tensors": names,
    }


def _tensor_items(ckpt: Checkpoint):
    yield from ckpt.arrays.items()
    if ckpt.optimizer is not None:
        for k, v in ckpt.optimizer.m.items():
            yield f"opt.m.{k}", v
        for k, v in ckpt.optimizer.v.items():
            yield f"opt.v.{k}", v


def dumps(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for name, arr in _tensor_items(ckpt):
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def _expected_shapes(spec: NetworkSpec, header: dict) -> dict:
    shapes = spec.param_shapes()
    if header.get("optimizer") is not None:
        for name, shape in list(shapes.items()):
            if not name.endswith(("running_mean", "running_var")):
                shapes[f"opt.m.{name}"] = shape
                shapes[f"opt.v.{name}"] = shape
    return shapes


def loads(raw: bytes, expected_spec: Optional[NetworkSpec] = None) -> Checkpoint:
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CorruptHeaderError("not a spikegrad checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    pos = len(MAGIC) + 8
    try:
        header = json.loads(raw[pos:pos + header_len].decode("utf-8"))
        spec = NetworkSpec.from_dict(header["spec"])
        names = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"unreadable checkpoint header: {exc}") from None
    pos += header_len
    if expected_spec is not None and expected_spec.to_dict() != spec.to_dict():
        raise TopologyError(f"checkpoint topology {spec.name!r} ({len(spec.layers)} layers) does not match "
                            f"expected {expected_spec.name!r} ({len(expected_spec.layers)} layers)")
    expected = _expected_shapes(spec, header)
    tensors = {}
    for want in names:
        try:
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
        except (struct.error, UnicodeDecodeError):
            raise CorruptHeaderError(f"truncated tensor record for {want!r}") from None
        if name != want:
            raise CorruptHeaderError(f"tensor record {name!r} found where {want!r} was expected")
        if name not in expected:
            raise TopologyError(f"tensor {name!r} has no place in the stored topology")
        if tuple(shape) != tuple(expected[name]):
            raise ShapeMismatchError(f"tensor {name!r} has shape {tuple(shape)}, topology expects "
                                     f"{tuple(expected[name])}", tensor_name=name)
        count = int(np.prod(shape))
        if pos + 4 * count > len(raw):
            raise CorruptHeaderError(f"tensor {name!r} data truncated")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    if pos != len(raw):
        raise CorruptHeaderError(f"{len(raw) - pos} unexpected trailing bytes")
    missing = [n for n in expected if not n.startswith("opt.") and n not in tensors]
    if missing:
        raise TopologyError(f"checkpoint lacks tensors {missing}")
    thresholds = header.get("thresholds", [])
    if len(thresholds) != len(spec.spiking_indices()):
        raise TopologyError(f"{len(thresholds)} thresholds for {len(spec.spiking_indices())} spiking layers")

    arrays = {n: v for n, v in tensors.items() if not n.startswith("opt.")}
    opt = None
    if header.get("optimizer") is not None:
        o = header["optimizer"]
        opt = OptimizerState(o["beta1"], o["beta2"], o["eps"], o["step"],
                             {n[6:]: v for n, v in tensors.items() if n.startswith("opt.m.")},
                             {n[6:]: v for n, v in tensors.items() if n.startswith("opt.v.")})
    return Checkpoint(spec, arrays, thresholds, header.get("gamma"), header.get("metadata", {}), opt)


def load_checkpoint(path, expected_spec: Optional[NetworkSpec] = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads(raw, expected_spec)

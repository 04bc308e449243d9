"""Datasets: MNIST IDX files, synthetic generators and batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    """Images ``N×C×H×W`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be N×C×H×W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ContractError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, dict(self.meta))

    def split(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Shuffle once with ``seed`` and hold out ``fraction`` of samples: (rest, held_out)."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_held = int(round(fraction * len(self)))
        return self.subset(np.sort(order[n_held:])), self.subset(np.sort(order[:n_held]))

    def batches(self, batch_size: int, shuffle_seed=None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(images, labels)`` batches; order reproducible for a given seed."""
        if shuffle_seed is None:
            order = np.arange(len(self))
        else:
            order = np.random.default_rng(shuffle_seed).permutation(len(self))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            yield self.images[idx], self.labels[idx]


# -- IDX ----------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what} file truncated inside the magic number", offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what} file truncated inside the dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(f"{what} file truncated: expected {expected} bytes, found {len(raw)}",
                          offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"{what} file has {len(raw) - expected} trailing bytes", offset=expected)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label file pair (plain or gzip). Pixels are scaled by 1/255."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "image")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "label")
    if len(images) != len(labels):
        raise FormatError(f"image count {len(images)} does not match label count {len(labels)}", offset=4)
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} out of range for {num_classes} classes")
    pixels = images.astype(np.float32)[:, None] / np.float32(255.0)
    return Dataset(pixels, labels.astype(np.int64), num_classes, {"source": str(images_path)})


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX pair (pixels quantized to bytes)."""
    if dataset.images.shape[1] != 1:
        raise ContractError("IDX images are single-channel")
    n, _, h, w = dataset.images.shape
    pixels = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                  + dataset.labels.astype(np.uint8).tobytes())


def find_mnist(data_dir, split: str) -> tuple[Path, Path]:
    """Locate the standard MNIST file pair for ``split`` ('train' or 't10k'/'test')."""
    data_dir = Path(data_dir)
    names = MNIST_FILES["test" if split in ("test", "t10k") else "train"]
    found = []
    for stem in names:
        candidates = [data_dir / stem, data_dir / f"{stem}.gz",
                      data_dir / stem.replace("-idx", ".idx"), data_dir / f"{stem.replace('-idx', '.idx')}.gz"]
        match = next((c for c in candidates if c.exists()), None)
        if match is None:
            raise FileNotFoundError(f"no {stem}[.gz] in {data_dir}")
        found.append(match)
    return found[0], found[1]


def load_mnist(data_dir, split: str = "train") -> Dataset:
    images, labels = find_mnist(data_dir, split)
    return load_idx(images, labels)


# -- synthetic ----------------------------------------------------------------


def synth_twoclass(n: int, seed: int = 0, sigma: float = 0.08) -> Dataset:
    """Two Gaussian blobs in the unit square, separable by x + y = 1 with margin >= sigma.

    Samples closer than ``sigma`` to the boundary (or outside [0, 1]) are redrawn.
    Returned as ``N×2×1×1`` so it can feed a flatten + dense network.
    """
    if n < 2:
        raise ContractError("synth_twoclass needs n >= 2")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    centers = np.array([[0.3, 0.3], [0.7, 0.7]])
    points = np.empty((n, 2))
    for i, y in enumerate(labels):
        while True:
            p = centers[y] + sigma * rng.standard_normal(2)
            side = (p.sum() - 1.0) / np.sqrt(2.0)
            if (side if y else -side) >= sigma and np.all((p >= 0) & (p <= 1)):
                points[i] = p
                break
    return Dataset(points[:, :, None, None], labels, 2, {"source": "synth_twoclass", "seed": seed})


def synth_images(n: int, num_classes: int = 10, shape=(1, 16, 16), seed: int = 0,
                 noise: float = 0.15) -> Dataset:
    """Class-prototype images plus pixel noise, clipped to [0, 1].

    Prototypes are smooth random blobs fixed by ``seed``; samples add Gaussian
    noise and a random brightness scaling so classes overlap somewhat.
    """
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    protos = np.zeros((num_classes, c, h, w))
    for k in range(num_classes):
        for ch in range(c):
            for _ in range(3):
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                r = rng.uniform(0.12, 0.3) * min(h, w)
                protos[k, ch] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    protos /= protos.max(axis=(1, 2, 3), keepdims=True)
    labels = rng.integers(0, num_classes, size=n)
    gain = rng.uniform(0.6, 1.0, size=(n, 1, 1, 1))
    images = gain * protos[labels] + noise * rng.standard_normal((n, c, h, w))
    return Dataset(np.clip(images, 0.0, 1.0), labels, num_classes,
                   {"source": "synth_images", "seed": seed})


def synth_features(n: int, num_features: int = 64, num_classes: int = 10, seed: int = 0) -> Dataset:
    """Flat feature vectors (``N×F×1×1``) around random class centroids, for dense stacks."""
    rng = np.random.default_rng(seed)
    centroids = rng.uniform(0.2, 0.8, size=(num_classes, num_features))
    labels = rng.integers(0, num_classes, size=n)
    x = centroids[labels] + 0.1 * rng.standard_normal((n, num_features))
    return Dataset(np.clip(x, 0.0, 1.0)[:, :, None, None], labels, num_classes,
                   {"source": "synth_features", "seed": seed})


def load_digits(size: int = 28) -> Dataset:
    """scikit-learn's 8×8 handwritten digits, upsampled to ``size×size`` (nearest neighbour)."""
    from sklearn.datasets import load_digits as _sk_digits

    raw = _sk_digits()
    images = raw.images / 16.0
    idx = (np.arange(size) * 8) // size
    big = images[:, idx][:, :, idx]
    return Dataset(big[:, None], raw.target, 10, {"source": "sklearn_digits"})

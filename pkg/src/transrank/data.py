"""Datasets: synthetic generators, IDX ingestion, splits and the correct-sample filter."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffnet
from .errors import (
    ConfigError,
    IDXCountError,
    IDXDimensionError,
    IDXMagicError,
    IDXTruncatedError,
    ShapeError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(eq=False)
class Dataset:
    """Stacked inputs ``(N, *sample_shape)`` in [0, 1] with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split_tag: str = "train"

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ShapeError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ConfigError("inputs must lie in [0, 1]")
        if self.split_tag not in ("train", "test", "val"):
            raise ConfigError(f"unknown split tag {self.split_tag!r}")

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.split_tag == other.split_tag
            and self.inputs.shape == other.inputs.shape
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def sample_shape(self):
        return self.inputs.shape[1:]

    def subset(self, indices, split_tag=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes,
                       split_tag or self.split_tag)

    def reshaped(self, *sample_shape):
        """Same samples viewed with a new per-sample shape, e.g. 64 -> (1, 8, 8)."""
        return Dataset(self.inputs.reshape(len(self), *sample_shape), self.labels,
                       self.num_classes, self.split_tag)


@dataclass(eq=False)
class EvalSet:
    """Samples of ``source`` that a designated model classifies correctly.

    ``indices`` point into the dataset originally passed to
    :func:`filter_correct`, in their original order.
    """

    base: Dataset
    indices: np.ndarray
    source_size: int

    @property
    def retained_fraction(self):
        return len(self.indices) / self.source_size if self.source_size else 0.0

    def __len__(self):
        return len(self.base)

    def __eq__(self, other):
        if not isinstance(other, EvalSet):
            return NotImplemented
        return (self.base == other.base and np.array_equal(self.indices, other.indices)
                and self.source_size == other.source_size)


def gen_blobs(n, num_classes, dim, spread, seed) -> Dataset:
    """Isotropic Gaussian clusters with centers drawn in [0.25, 0.75]^dim, clipped to [0, 1]."""
    if num_classes < 2 or n < num_classes or dim < 1:
        raise ConfigError("gen_blobs needs num_classes >= 2, n >= num_classes, dim >= 1")
    if not spread > 0:
        raise ConfigError("spread must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.25, 0.75, size=(num_classes, dim))
    labels = rng.permutation(np.arange(n) % num_classes)
    x = centers[labels] + rng.normal(0.0, spread, size=(n, dim))
    return Dataset(np.clip(x, 0.0, 1.0), labels, num_classes)


def gen_rings(n, seed) -> Dataset:
    """Two concentric annuli around (0.5, 0.5): radii 0.25 and 0.40, width 0.05 either side."""
    if n < 2:
        raise ConfigError("gen_rings needs n >= 2")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    radius = np.array([0.25, 0.40])[labels] + rng.uniform(-0.05, 0.05, size=n)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    x = 0.5 + radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return Dataset(np.clip(x, 0.0, 1.0), labels, 2)


def split(ds: Dataset, test_fraction, seed):
    """Seeded shuffle split into ``(train, test)`` datasets."""
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    if n_test == 0 or n_test == len(ds):
        raise ConfigError("split leaves an empty side")
    return ds.subset(np.sort(perm[n_test:]), "train"), ds.subset(np.sort(perm[:n_test]), "test")


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx_images(raw):
    if len(raw) < 4:
        raise IDXTruncatedError("image file shorter than its magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != IDX_IMAGES_MAGIC:
        raise IDXMagicError(f"image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(raw) < 16:
        raise IDXTruncatedError("image header truncated")
    n, rows, cols = struct.unpack(">III", raw[4:16])
    if rows == 0 or cols == 0:
        raise IDXDimensionError(f"degenerate image size {rows}x{cols}")
    expected = n * rows * cols
    payload = raw[16:]
    if len(payload) < expected:
        raise IDXTruncatedError(f"image payload has {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise IDXDimensionError(f"image payload has {len(payload) - expected} bytes beyond declared dimensions")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def _parse_idx_labels(raw):
    if len(raw) < 4:
        raise IDXTruncatedError("label file shorter than its magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != IDX_LABELS_MAGIC:
        raise IDXMagicError(f"label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw) < 8:
        raise IDXTruncatedError("label header truncated")
    (n,) = struct.unpack(">I", raw[4:8])
    payload = raw[8:]
    if len(payload) < n:
        raise IDXTruncatedError(f"label payload has {len(payload)} bytes, header declares {n}")
    if len(payload) > n:
        raise IDXDimensionError(f"label payload has {len(payload) - n} bytes beyond declared count")
    return np.frombuffer(payload, dtype=np.uint8)


def load_idx(images_path, labels_path, limit=None, downsample_to=None, num_classes=None) -> Dataset:
    """Load an IDX image/label pair as ``(N, 1, H, W)`` samples scaled to [0, 1].

    ``downsample_to`` average-pools to a square side that must divide the
    image side (28 -> 14 or 7 for digits). ``num_classes`` defaults to the
    largest label plus one. Gzipped files are read transparently.
    """
    images = _parse_idx_images(_read_bytes(images_path))
    labels = _parse_idx_labels(_read_bytes(labels_path))
    if len(images) != len(labels):
        raise IDXCountError(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.astype(np.float32) / np.float32(255.0)
    n, rows, cols = x.shape
    if downsample_to is not None and (rows, cols) != (downsample_to, downsample_to):
        if rows != cols or rows % downsample_to:
            raise IDXDimensionError(f"cannot pool {rows}x{cols} down to {downsample_to}x{downsample_to}")
        f = rows // downsample_to
        x = x.reshape(n, downsample_to, f, downsample_to, f).mean(axis=(2, 4), dtype=np.float64)
        x = x.astype(np.float32)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(x[:, None], labels.astype(np.int64), num_classes, "test")


def write_idx(ds: Dataset, images_path, labels_path):
    """Write a single-channel image dataset as an IDX pair, quantizing pixels to u8."""
    x = ds.inputs
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 3:
        raise ShapeError(f"IDX images need (N, H, W) or (N, 1, H, W), got {ds.inputs.shape}")
    if len(ds) and ds.labels.max() > 255:
        raise ShapeError("IDX labels are single bytes")
    pixels = np.rint(x.astype(np.float64) * 255.0).astype(np.uint8)
    n, rows, cols = pixels.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


def filter_correct(ds, model: diffnet.Network) -> EvalSet:
    """Keep only samples where ``model``'s argmax equals the label, preserving order."""
    if isinstance(ds, EvalSet):
        inner = filter_correct(ds.base, model)
        return EvalSet(inner.base, ds.indices[inner.indices], ds.source_size)
    if model.num_classes != ds.num_classes:
        raise ShapeError(f"model has {model.num_classes} classes, dataset {ds.num_classes}")
    if len(ds) == 0:
        return EvalSet(ds, np.zeros(0, np.int64), 0)
    keep = np.flatnonzero(diffnet.predict(model, ds.inputs) == ds.labels)
    return EvalSet(ds.subset(keep), keep, len(ds))

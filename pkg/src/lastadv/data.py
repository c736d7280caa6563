"""Dataset loaders (IDX, CIFAR-10 binary, synthetic blobs) and batching.

Pixels are scaled by 1/255 into [0, 1] with no further standardization, so
perturbation budgets stay in pixel units.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autograd import as_tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_LAYOUT = (3, 32, 32)


class DataFormatError(ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class RecordLengthError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


class EmptyDatasetError(DataFormatError):
    pass


class GeometryError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray          # (N, D), values in [0, 1]
    labels: np.ndarray          # (N,), int64 in [0, num_classes)
    num_classes: int
    layout: tuple[int, int, int] | None = None   # (channels, height, width)
    split: str = "train"

    def __post_init__(self):
        self.inputs = as_tensor(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise DataFormatError(f"inputs {self.inputs.shape} vs labels {self.labels.shape}")
        if self.layout is not None and int(np.prod(self.layout)) != self.inputs.shape[1]:
            raise DataFormatError(f"layout {self.layout} does not match dim {self.inputs.shape[1]}")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.layout is None else self.layout[0]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes,
                       self.layout, split or self.split)


@dataclass
class Batch:
    inputs: np.ndarray   # (B, D)
    labels: np.ndarray   # (B,)
    index: np.ndarray | None = None

    def __len__(self) -> int:
        return self.labels.shape[0]


def _read_idx(path, expected_magic: int) -> tuple[list[int], bytes]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise TruncatedPayloadError(f"{path}: header truncated")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise TruncatedPayloadError(f"{path}: header truncated")
    dims = list(struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim]))
    payload = data[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    return dims, payload[:need]


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    idims, pixels = _read_idx(images_path, IDX_IMAGES_MAGIC)
    ldims, labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if idims[0] != ldims[0]:
        raise CountMismatchError(f"{idims[0]} images but {ldims[0]} labels")
    n, h, w = idims
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(n, h * w) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    if n and y.max() >= num_classes:
        raise LabelRangeError(f"label {y.max()} outside [0, {num_classes})")
    return Dataset(x, y, num_classes, (1, h, w), split)


def load_cifar_binary(paths: Sequence, split: str = "train") -> Dataset:
    xs, ys = [], []
    for path in paths:
        data = Path(path).read_bytes()
        if len(data) % CIFAR_RECORD:
            raise RecordLengthError(f"{path}: length {len(data)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = records[:, 0].astype(np.int64)
        if labels.size and labels.max() >= 10:
            raise LabelRangeError(f"{path}: label {labels.max()} outside [0, 10)")
        ys.append(labels)
        xs.append(records[:, 1:] / 255.0)
    if not xs:
        raise EmptyDatasetError("no CIFAR files given")
    return Dataset(np.concatenate(xs), np.concatenate(ys), 10, CIFAR_LAYOUT, split)


def synth_blobs(num_classes: int, per_class: int, dim: int, margin: float, seed: int,
                split: str = "train") -> Dataset:
    """Gaussian blobs whose means sit on distinct coordinate axes.

    Every mean has all coordinates at ``0.5 - margin / 2`` except coordinate
    ``k`` (for class ``k``), which is raised by ``margin``; means are therefore
    ``margin * sqrt(2)`` apart.  Noise std is ``margin / 6`` and samples are
    clamped to [0, 1].
    """
    if not margin > 0:
        raise GeometryError("margin must be positive")
    if num_classes < 2 or num_classes > dim:
        raise GeometryError(f"cannot place {num_classes} class means on {dim} axes")
    if margin > 1:
        raise GeometryError("margin > 1 does not fit inside the unit cube")
    if per_class < 1:
        raise EmptyDatasetError("per_class must be at least 1")
    rng = np.random.default_rng(seed)
    base = 0.5 - margin / 2
    means = np.full((num_classes, dim), base)
    means[np.arange(num_classes), np.arange(num_classes)] += margin
    labels = np.repeat(np.arange(num_classes), per_class)
    x = means[labels] + rng.normal(0.0, margin / 6, size=(labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(np.clip(x[order], 0.0, 1.0), labels[order], num_classes, None, split)


def batch_iter(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    perm = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = perm[start:start + batch_size]
        yield Batch(dataset.inputs[idx], dataset.labels[idx], idx)


def sequential_batches(dataset: Dataset, batch_size: int) -> Iterator[Batch]:
    """Unshuffled batches, used for evaluation."""
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        yield Batch(dataset.inputs[idx], dataset.labels[idx], idx)

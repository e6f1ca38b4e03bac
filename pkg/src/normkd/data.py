"""Binary image-record datasets, a synthetic generator and batching."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .rng import derive_rng


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, C], float64
    labels: np.ndarray  # [N], int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DatasetError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.images)):
            raise DatasetError("images contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])


def load_binary_dataset(path, height: int, width: int, channels: int, num_classes: int,
                        name: str = "") -> Dataset:
    """Read CIFAR-style records: one label byte then ``C*H*W`` channel-planar pixel bytes.

    Pixels are scaled to [0, 1] by dividing by 255; record order is kept.
    """
    raw = np.fromfile(os.fspath(path), dtype=np.uint8)
    record = 1 + channels * height * width
    if raw.size % record:
        raise DatasetError(f"{path}: {raw.size} bytes is not a multiple of record size {record} (truncated?)")
    recs = raw.reshape(-1, record)
    labels = recs[:, 0].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise DatasetError(f"{path}: record {bad} has label {labels[bad]} >= num_classes {num_classes}")
    pixels = recs[:, 1:].reshape(-1, channels, height, width).transpose(0, 2, 3, 1)
    return Dataset(pixels.astype(np.float64) / 255.0, labels, num_classes, name or os.path.basename(os.fspath(path)))


def write_binary_dataset(path, images_u8: np.ndarray, labels) -> None:
    """Inverse of :func:`load_binary_dataset` for ``uint8`` NHWC images."""
    images_u8 = np.asarray(images_u8)
    if images_u8.dtype != np.uint8:
        raise DatasetError("images must be uint8")
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    planar = images_u8.transpose(0, 3, 1, 2).reshape(len(images_u8), -1)
    with open(path, "wb") as f:
        f.write(np.concatenate([labels, planar], axis=1).tobytes())


def standardize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Per-channel mean/std standardisation using statistics of ``train``."""
    mean = train.images.mean(axis=(0, 1, 2))
    std = train.images.std(axis=(0, 1, 2))
    std = np.where(std > 0, std, 1.0)
    return [Dataset((d.images - mean) / std, d.labels, d.num_classes, d.name) for d in (train, *others)]


def generate_synthetic(num_classes: int, per_class: int, shape=(16, 16, 3), noise_sigma: float = 0.1,
                       seed: int = 0, stream: str = "train") -> Dataset:
    """Noisy copies of one random template per class, clamped to [0, 1].

    Templates depend only on ``(seed, class)``, so splits generated with a
    different ``stream`` share templates but draw independent noise.
    Samples are ordered class by class.
    """
    if num_classes < 1 or per_class < 0 or noise_sigma < 0:
        raise DatasetError("num_classes must be positive, per_class and noise_sigma non-negative")
    shape = tuple(int(s) for s in shape)
    images = np.empty((num_classes * per_class, *shape))
    for k in range(num_classes):
        template = derive_rng(seed, "template", k).uniform(0.0, 1.0, size=shape)
        noise = derive_rng(seed, "noise", stream, k).normal(0.0, 1.0, size=(per_class, *shape))
        images[k * per_class:(k + 1) * per_class] = np.clip(template + noise_sigma * noise, 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(images, labels, num_classes, f"synthetic-{stream}")


def epoch_order(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return derive_rng(shuffle_seed, "shuffle", epoch).permutation(n)


def batch_indices(n: int, batch_size: int, shuffle_seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(n, shuffle_seed, epoch)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def batch_iterator(ds: Dataset, batch_size: int, shuffle_seed: int,
                   epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches of one shuffled epoch."""
    for idx in batch_indices(len(ds), batch_size, shuffle_seed, epoch):
        yield ds.images[idx], ds.labels[idx]

"""Datasets: CIFAR-10 binary batches and a synthetic class-conditional generator."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = ("test_batch.bin",)


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError(f"{self.split} split is empty")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split)


def parse_cifar_records(buf: bytes, source: str = "<bytes>"):
    """Decode 3073-byte records: one label byte, then R, G, B planes of 32x32 pixels."""
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD * CIFAR_RECORD
        raise FormatError(f"{source}: truncated record at byte offset {whole} "
                          f"({len(buf) - whole} of {CIFAR_RECORD} bytes)")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{source}: label {labels[bad[0]]} > 9 at byte offset {bad[0] * CIFAR_RECORD}")
    images = raw[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / np.float32(255)
    return images, labels


def _read_split(root: Path, names, split: str) -> Dataset:
    imgs, labs = [], []
    for name in names:
        path = root / name
        try:
            buf = path.read_bytes()
        except OSError as e:
            raise DataError(f"{path}: {e.strerror}") from e
        i, l = parse_cifar_records(buf, str(path))
        imgs.append(i)
        labs.append(l)
    return Dataset(np.concatenate(imgs), np.concatenate(labs), 10, split)


def load_cifar10(directory):
    """Load ``(train, test)`` from the CIFAR-10 binary distribution."""
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"{root}: dataset directory not found")
    nested = root / "cifar-10-batches-bin"
    if not (root / CIFAR_TEST[0]).exists() and nested.is_dir():
        root = nested
    return _read_split(root, CIFAR_TRAIN, "train"), _read_split(root, CIFAR_TEST, "test")


def synthetic_dataset(seed: int, n: int, classes: int = 10, image_size: int = 32,
                      split: str = "train") -> Dataset:
    """Class-conditional Gaussian blobs on a noisy background.

    Each class owns a blob position (on a ring around the image center) and a
    hue (evenly spaced on the colour wheel); samples jitter the position and
    add pixel noise. Class patterns depend only on ``classes`` and
    ``image_size``, so train and test splits drawn with different seeds
    share them.
    """
    if n < classes:
        raise ContractError(f"need at least one sample per class: n={n} < classes={classes}")
    colors = np.array([colorsys.hsv_to_rgb(k / classes, 0.8, 1.0) for k in range(classes)])
    angles = 2 * np.pi * np.arange(classes) / classes
    radius = image_size / 4
    centers = np.stack([image_size / 2 + radius * np.sin(angles),
                        image_size / 2 + radius * np.cos(angles)], axis=1)
    sigma = image_size / 8

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    jitter = rng.normal(0.0, image_size / 32, size=(n, 2))
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    cy = (centers[labels, 0] + jitter[:, 0])[:, None, None]
    cx = (centers[labels, 1] + jitter[:, 1])[:, None, None]
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    images = blob[:, None] * colors[labels][:, :, None, None]
    images += rng.uniform(0.0, 0.15, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), classes, split)

"""Dataset ingestion: CIFAR-10 binary files, a synthetic template dataset
for desk-scale runs, CSV input, and training-time augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


@dataclass
class Dataset:
    train_x: np.ndarray  # [N, C, H, W] float32
    train_y: np.ndarray  # [N] int64
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    standardization: dict | None = None

    @property
    def resolution(self):
        return self.train_x.shape[2]

    @property
    def channels(self):
        return self.train_x.shape[1]


def load_cifar10_binary(path):
    """Parse one CIFAR-10 binary file into ([n,3,32,32] in [0,1], labels)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label {labels.max()} out of range [0, 9]")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return pixels, labels


def standardize(train_x, test_x, eps=1e-8):
    """Per-channel standardization with constants taken from the train set."""
    mean = train_x.mean(axis=(0, 2, 3))
    std = np.maximum(train_x.std(axis=(0, 2, 3)), eps)
    constants = {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}
    mean4 = mean[None, :, None, None].astype(np.float32)
    std4 = std[None, :, None, None].astype(np.float32)
    return (train_x - mean4) / std4, (test_x - mean4) / std4, constants


def load_cifar10_dir(path):
    """Load the standard binary layout: data_batch_*.bin plus test_batch.bin."""
    root = Path(path)
    train_files = sorted(root.glob("data_batch_*.bin")) or sorted(root.glob("data_batch_*"))
    test_file = root / "test_batch.bin"
    if not test_file.exists():
        candidates = sorted(root.glob("test_batch*"))
        if not candidates:
            raise ValueError(f"{root}: no test_batch file found")
        test_file = candidates[0]
    if not train_files:
        raise ValueError(f"{root}: no data_batch files found")
    xs, ys = zip(*(load_cifar10_binary(f) for f in train_files))
    train_x = np.concatenate(xs)
    train_y = np.concatenate(ys)
    test_x, test_y = load_cifar10_binary(test_file)
    train_x, test_x, constants = standardize(train_x, test_x)
    return Dataset(
        train_x=train_x, train_y=train_y, test_x=test_x, test_y=test_y,
        num_classes=10, standardization=constants,
    )


def generate_synthetic(classes, per_class, resolution, noise, seed,
                       per_class_test=None, channels=3):
    """Class templates plus Gaussian noise; linearly separable as noise -> 0."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if per_class_test is None:
        per_class_test = max(1, per_class // 4)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5D47A)))
    templates = rng.normal(0.0, 1.0, size=(classes, channels, resolution, resolution))

    def make_split(n):
        x = np.empty((classes * n, channels, resolution, resolution), dtype=np.float32)
        y = np.empty(classes * n, dtype=np.int64)
        for c in range(classes):
            block = templates[c] + noise * rng.normal(size=(n, channels, resolution, resolution))
            x[c * n : (c + 1) * n] = block.astype(np.float32)
            y[c * n : (c + 1) * n] = c
        return x, y

    train_x, train_y = make_split(per_class)
    test_x, test_y = make_split(per_class_test)
    return Dataset(
        train_x=train_x, train_y=train_y, test_x=test_x, test_y=test_y,
        num_classes=classes, standardization=None,
    )


def load_csv(train_path, test_path, channels, resolution):
    """CSV rows: label followed by channels*resolution^2 pixel values."""
    expected = channels * resolution * resolution

    def read(path):
        table = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        if table.shape[1] != expected + 1:
            raise ValueError(
                f"{path}: rows have {table.shape[1]} columns, expected {expected + 1}"
            )
        y = table[:, 0].astype(np.int64)
        x = table[:, 1:].astype(np.float32).reshape(-1, channels, resolution, resolution)
        return x, y

    train_x, train_y = read(train_path)
    test_x, test_y = read(test_path)
    num_classes = int(max(train_y.max(), test_y.max())) + 1
    return Dataset(
        train_x=train_x, train_y=train_y, test_x=test_x, test_y=test_y,
        num_classes=num_classes, standardization=None,
    )


def hflip(x):
    """Mirror the width axis of an NCHW batch."""
    return x[..., ::-1]


def augment(batch, rng, pad=4):
    """Random pad-and-crop plus 50% horizontal flip, per image.

    Training-time only; evaluation batches are used as-is.
    """
    n, c, h, w = batch.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=batch.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = batch
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i in range(n):
        oy, ox = offsets[i]
        crop = padded[i, :, oy : oy + h, ox : ox + w]
        out[i] = crop[..., ::-1] if flips[i] else crop
    return out

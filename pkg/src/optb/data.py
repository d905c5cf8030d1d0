"""Datasets: a synthetic Gaussian-blob task and the label-byte + pixel-record
binary layout used by the classic CIFAR binary files."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


def gaussian_blobs(
    n_per_class: int,
    n_classes: int = 10,
    shape: tuple[int, int, int] = (8, 8, 1),
    seed: int = 0,
    spread: float = 0.6,
    split_seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional Gaussian clusters quantised to uint8 pixels.

    The class centres depend only on ``seed`` and ``n_classes``, so train and
    test splits drawn with different ``split_seed`` share the same task.
    """
    dim = math.prod(shape)
    centres = np.random.default_rng(seed).normal(size=(n_classes, dim))
    rng = np.random.default_rng([seed, split_seed])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    points = centres[labels] + spread * rng.normal(size=(len(labels), dim))
    pixels = np.clip(np.rint(128 + 48 * points), 0, 255).astype(np.uint8)
    order = rng.permutation(len(labels))
    return pixels[order].reshape((-1,) + tuple(shape)), labels[order]


def read_records(path: str | Path, shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Read ``(1 label byte, C*H*W channel-major pixel bytes)`` records.

    Returns images as ``(N, H, W, C)`` uint8 and labels as int64.
    """
    h, w, c = shape
    record = 1 + h * w * c
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if raw.size == 0 or raw.size % record:
        raise DataError(f"{path}: {raw.size} bytes is not a whole number of {record}-byte records")
    rows = raw.reshape(-1, record)
    labels = rows[:, 0].astype(np.int64)
    images = rows[:, 1:].reshape(-1, c, h, w).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_records(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise DataError("labels must fit in one byte")
    planes = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    rows = np.concatenate([labels.astype(np.uint8)[:, None], planes], axis=1)
    rows.tofile(path)


def read_raw_image(path: str | Path, shape: tuple[int, int, int]) -> np.ndarray:
    """A single image stored as H*W*C row-major bytes."""
    data = Path(path).read_bytes()
    if len(data) != math.prod(shape):
        raise DataError(f"{path}: {len(data)} bytes, expected {math.prod(shape)} for shape {shape}")
    return np.frombuffer(data, dtype=np.uint8).reshape(shape)

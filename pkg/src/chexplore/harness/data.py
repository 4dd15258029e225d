"""Datasets: built-in synthetic generators and an IDX (MNIST-style) reader."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError, InvalidArgumentError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
EVAL_FRACTION = 0.2


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_eval.max())) + 1


def stratified_split(x, y, rng: np.random.Generator, eval_fraction: float = EVAL_FRACTION) -> Dataset:
    """Shuffle within each class and send ``eval_fraction`` of it to the eval split."""
    train_idx, eval_idx = [], []
    for label in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == label))
        n_eval = int(round(eval_fraction * idx.size))
        eval_idx.append(idx[:n_eval])
        train_idx.append(idx[n_eval:])
    tr = rng.permutation(np.concatenate(train_idx))
    ev = np.sort(np.concatenate(eval_idx))
    return Dataset(x[tr], y[tr], x[ev], y[ev])


def _class_sizes(n, classes):
    base, extra = divmod(n, classes)
    return [base + (1 if k < extra else 0) for k in range(classes)]


def make_blobs(n, classes, noise, rng):
    # centres evenly spaced on a circle of radius 3
    xs, ys = [], []
    for k, m in enumerate(_class_sizes(n, classes)):
        angle = 2.0 * math.pi * k / classes
        centre = 3.0 * np.array([math.cos(angle), math.sin(angle)])
        xs.append(centre + noise * rng.standard_normal((m, 2)))
        ys.append(np.full(m, k))
    return np.concatenate(xs), np.concatenate(ys)


def make_spirals(n, classes, noise, rng):
    # interleaved arms, 1.25 turns each; noise perturbs the angle (in radians, x 2)
    xs, ys = [], []
    for k, m in enumerate(_class_sizes(n, classes)):
        r = np.linspace(0.05, 1.0, m)
        theta = 2.0 * math.pi * (k / classes + 1.25 * r) + 2.0 * noise * rng.standard_normal(m)
        xs.append(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1) * 3.0)
        ys.append(np.full(m, k))
    return np.concatenate(xs), np.concatenate(ys)


GENERATORS = {"blobs": make_blobs, "spirals": make_spirals}


def generate_synthetic_dataset(kind: str, n: int, classes: int, noise: float, seed: int) -> Dataset:
    """Deterministic 2-D toy dataset with a stratified 80/20 train/eval split."""
    if kind not in GENERATORS:
        raise InvalidArgumentError(f"unknown dataset kind {kind!r}; expected one of {sorted(GENERATORS)}")
    if classes < 2:
        raise InvalidArgumentError(f"need at least 2 classes, got {classes}")
    if n < classes * 10:
        raise InvalidArgumentError(f"n must be at least 10 per class ({classes * 10}), got {n}")
    if noise < 0:
        raise InvalidArgumentError(f"noise must be non-negative, got {noise}")
    rng = np.random.default_rng(seed)
    x, y = GENERATORS[kind](n, classes, noise, rng)
    return stratified_split(x, y.astype(np.int64), rng)


# --------------------------------------------------------------------------- IDX


def _read_idx(path, expected_magic: int, what: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{what} file too short for a magic number", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{what} file has magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what} file truncated inside the dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) != header + count:
        raise FormatError(
            f"{what} file holds {len(raw) - header} data bytes, header declares {count}", offset=header
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_arrays(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images flattened and scaled to [0, 1], plus integer labels."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4)
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def load_idx(images_path, labels_path, seed: int = 0) -> Dataset:
    x, y = load_idx_arrays(images_path, labels_path)
    return stratified_split(x, y, np.random.default_rng(seed))


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used for fixtures)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    Path(path).write_bytes(struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes())

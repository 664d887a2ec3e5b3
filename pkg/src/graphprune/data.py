"""Datasets: IDX (MNIST / Fashion-MNIST) files and seeded synthetic images."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass
class DatasetHandle:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    mean: float
    std: float
    classes: int

    def manifest(self) -> dict:
        return {"train": int(len(self.train_x)), "test": int(len(self.test_x)),
                "mean": float(self.mean), "std": float(self.std), "classes": self.classes,
                "shape": list(self.train_x.shape[1:])}

    def astype(self, dtype) -> "DatasetHandle":
        return DatasetHandle(self.train_x.astype(dtype), self.train_y, self.test_x.astype(dtype),
                             self.test_y, self.mean, self.std, self.classes)


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx_images(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 16:
        raise DatasetError(f"{path}: truncated header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGES_MAGIC:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x} (expected 0x{IMAGES_MAGIC:08x})")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise DatasetError(f"{path}: truncated file ({len(raw)} bytes, expected {need})")
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABELS_MAGIC:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x} (expected 0x{LABELS_MAGIC:08x})")
    if len(raw) < 8 + count:
        raise DatasetError(f"{path}: truncated file ({len(raw)} bytes, expected {8 + count})")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as ``(N, 1, rows, cols)`` float32 in [0, 1] plus integer labels."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DatasetError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return (images[:, None].astype(np.float32) / 255.0), labels


def _find(d: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (d / name).exists():
            return d / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {d}")


def load_fashion_mnist(directory, train_limit: int | None = None, test_limit: int | None = None,
                       seed: int = 0) -> DatasetHandle:
    """Standard file names in ``directory``; optional seeded subsets."""
    d = Path(directory)
    tx, ty = load_idx(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"))
    vx, vy = load_idx(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"))
    rng = np.random.default_rng(seed)
    if train_limit is not None and train_limit < len(tx):
        idx = np.sort(rng.permutation(len(tx))[:train_limit])
        tx, ty = tx[idx], ty[idx]
    if test_limit is not None and test_limit < len(vx):
        idx = np.sort(rng.permutation(len(vx))[:test_limit])
        vx, vy = vx[idx], vy[idx]
    return _normalise(tx, ty, vx, vy, 10)


def _normalise(tx, ty, vx, vy, classes) -> DatasetHandle:
    mean = float(tx.mean())
    std = float(tx.std()) or 1.0
    return DatasetHandle(((tx - mean) / std).astype(np.float32), ty,
                         ((vx - mean) / std).astype(np.float32), vy, mean, std, classes)


def synth_dataset(classes: int = 10, dims=(1, 28, 28), samples: int = 512, seed: int = 0,
                  margin: float = 3.0, test_samples: int | None = None, noise: float = 1.0
                  ) -> DatasetHandle:
    """Gaussian class-conditional samples around per-class mean images.

    Class means are oriented sinusoidal gratings (random orientation,
    frequency and phase per class) scaled to RMS ``margin``; samples add
    i.i.d. Gaussian pixel noise of standard deviation ``noise``.  Labels are
    balanced.  For vector ``dims`` the means are random unit directions
    scaled by ``margin * sqrt(F)``.
    """
    if samples < 1:
        raise DatasetError("synthetic dataset needs at least one sample")
    if classes < 2:
        raise DatasetError("synthetic dataset needs at least two classes")
    dims = tuple(dims)
    rng = np.random.default_rng(seed)
    if len(dims) == 3:
        c, h, w = dims
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        means = np.empty((classes,) + dims)
        for k in range(classes):
            theta = np.pi * (k + rng.uniform(0, 1)) / classes
            freq = rng.uniform(0.15, 0.6)
            for ch in range(c):
                phase = rng.uniform(0, 2 * np.pi)
                pat = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
                means[k, ch] = pat / np.sqrt(np.mean(pat ** 2))
        means *= margin
    else:
        (f,) = dims
        m = rng.standard_normal((classes, f))
        means = m / np.linalg.norm(m, axis=1, keepdims=True) * margin * np.sqrt(f)

    def draw(n):
        y = np.arange(n) % classes
        rng.shuffle(y)
        x = means[y] + noise * rng.standard_normal((n,) + dims)
        return x.astype(np.float32), y.astype(np.int64)

    tx, ty = draw(samples)
    vx, vy = draw(test_samples if test_samples is not None else max(samples // 4, classes))
    return _normalise(tx, ty, vx, vy, classes)

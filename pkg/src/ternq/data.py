"""Synthetic classification datasets and a portable-graymap loader.

Desk-scale stand-ins for the image benchmarks: 2-D point clouds for dense
models and 8x8 pattern images for convolutional ones. All generators take
an explicit numpy Generator so runs are reproducible from a single seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.x_train.shape[1:]

    @property
    def num_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_val.max())) + 1


def _split(x, y, n_train, rng):
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:])


def make_blobs(n_train=300, n_val=300, classes=4, noise=0.6, rng=None) -> Dataset:
    """Gaussian clusters with centers spaced on a circle of radius 2."""
    rng = rng if rng is not None else np.random.default_rng(0)
    n = n_train + n_val
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    y = np.arange(n) % classes
    x = centers[y] + rng.normal(0.0, noise, size=(n, 2))
    return _split(x, y, n_train, rng)


def make_moons(n_train=200, n_val=200, noise=0.15, rng=None) -> Dataset:
    """Two interleaved half-circles, the classic nonlinear 2-class set."""
    rng = rng if rng is not None else np.random.default_rng(0)
    n = n_train + n_val
    half = (n + 1) // 2
    t = rng.uniform(0, np.pi, half)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.vstack([upper, lower])[:n] + rng.normal(0.0, noise, size=(n, 2))
    y = np.array([0] * half + [1] * half)[:n]
    return _split(x, y, n_train, rng)


def _pattern_templates() -> np.ndarray:
    """Six 8x8 templates in {-1,+1}: stripes, checkers, diagonal, cross, box."""
    idx = np.arange(8)
    row, col = np.meshgrid(idx, idx, indexing="ij")
    return np.stack([
        np.where(row % 2 == 0, 1.0, -1.0),
        np.where(col % 2 == 0, 1.0, -1.0),
        np.where((row // 2 + col // 2) % 2 == 0, 1.0, -1.0),
        np.where((row + col) % 4 < 2, 1.0, -1.0),
        np.where((row == 3) | (row == 4) | (col == 3) | (col == 4), 1.0, -1.0),
        np.where((row % 7 == 0) | (col % 7 == 0), 1.0, -1.0),
    ])


def make_patterns(n_train=512, n_val=256, classes=4, noise=0.5, rng=None) -> Dataset:
    """8x8 single-channel images: a class template plus Gaussian pixel noise."""
    if not 2 <= classes <= 6:
        raise ValueError(f"pattern generator supports 2..6 classes, got {classes}")
    rng = rng if rng is not None else np.random.default_rng(0)
    templates = _pattern_templates()[:classes]
    n = n_train + n_val
    y = np.arange(n) % classes
    amplitude = rng.uniform(0.6, 1.0, size=(n, 1, 1))
    x = templates[y] * amplitude + rng.normal(0.0, noise, size=(n, 8, 8))
    x = x[:, None, :, :]  # add the channel axis
    return _split(x, y, n_train, rng)


def write_pgm(path, image: np.ndarray, maxval: int = 255):
    """Write a 2-D uint8-ranged array as a binary (P5) portable graymap."""
    img = np.clip(np.asarray(image), 0, maxval).astype(np.uint8)
    if img.ndim != 2:
        raise ValueError(f"pgm image must be 2-D, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P2 (ascii) or P5 (binary) portable graymap into a float array in [0,1]."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        img = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
    elif magic == b"P2":
        values = data[pos:].split()
        img = np.array([int(v) for v in values[: w * h]], dtype=np.float64).reshape(h, w)
    else:
        raise ValueError(f"{path}: not a portable graymap (magic {magic!r})")
    return img.astype(np.float64) / maxval


def load_pgm_dataset(root, val_fraction=0.25, rng=None) -> Dataset:
    """Load class-per-subdirectory PGM images as a (N,1,H,W) dataset.

    Class indices follow sorted subdirectory names; the train/val split is
    a deterministic shuffle from the supplied generator.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class subdirectories found")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        for p in sorted(d.glob("*.pgm")):
            images.append(read_pgm(p))
        labels += [label] * len(sorted(d.glob("*.pgm")))
    if not images:
        raise ValueError(f"{root}: no .pgm files found")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"{root}: images disagree on shape: {sorted(shapes)}")
    x = np.stack(images)[:, None, :, :]
    y = np.array(labels)
    n_val = max(1, int(round(val_fraction * len(y))))
    return _split(x, y, len(y) - n_val, rng)


GENERATORS = {
    "blobs": make_blobs,
    "moons": make_moons,
    "patterns": make_patterns,
}

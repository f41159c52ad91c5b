"""Labeled image datasets: directory format plus a synthetic digit generator.

A dataset directory holds ``images.bwt`` (n, c, h, w float32) and
``labels.bwt`` (n float32 class indices). The generator renders jittered
5x7 digit glyphs onto a 16x16 canvas so every test and CLI run works
without external data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio

_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float64
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.images)


def _glyph_bitmaps() -> np.ndarray:
    out = np.zeros((10, 14, 10))
    for digit, rows in _GLYPHS.items():
        bitmap = np.array([[int(ch) for ch in row] for row in rows], dtype=np.float64)
        out[digit] = np.kron(bitmap, np.ones((2, 2)))
    return out


def synthetic_digits(n: int, seed: int = 0, size: int = 16, noise: float = 0.1) -> Dataset:
    """Render n class-balanced digit images with random shift and brightness."""
    if n < 1:
        raise ValueError("n must be positive")
    glyphs = _glyph_bitmaps()
    gh, gw = glyphs.shape[1:]
    if size < max(gh, gw):
        raise ValueError(f"size must be at least {max(gh, gw)} to fit a glyph")
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % 10).astype(np.int64)
    rng.shuffle(labels)
    images = rng.normal(0.0, noise, size=(n, 1, size, size))
    dy = rng.integers(0, size - gh + 1, size=n)
    dx = rng.integers(0, size - gw + 1, size=n)
    brightness = rng.uniform(0.7, 1.0, size=n)
    for i in range(n):
        images[i, 0, dy[i] : dy[i] + gh, dx[i] : dx[i] + gw] += brightness[i] * glyphs[labels[i]]
    return Dataset(images=images, labels=labels)


def save_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(dataset.images.astype(np.float32), out_dir / "images.bwt")
    tensorio.write_tensor(dataset.labels.astype(np.float32), out_dir / "labels.bwt")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    images = tensorio.read_tensor(path / "images.bwt").astype(np.float64)
    labels = tensorio.read_tensor(path / "labels.bwt").astype(np.int64)
    if images.ndim != 4 or labels.ndim != 1 or len(images) != len(labels):
        raise ValueError(f"{path}: malformed dataset (images {images.shape}, labels {labels.shape})")
    return Dataset(images=images, labels=labels)


def resolve_dataset(spec: str) -> Dataset:
    """Load from a directory, or build one from ``synthetic:<n>[:<seed>]``."""
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        n = int(parts[1])
        seed = int(parts[2]) if len(parts) > 2 else 0
        return synthetic_digits(n, seed=seed)
    return load_dataset(spec)

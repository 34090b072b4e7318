"""Labeled image datasets: the bundled 8x8 digits and IDX (MNIST-format) files."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, H, W, 1], values in [0, 1]
    labels: np.ndarray  # [N] int
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise ValueError(f"need N > 0 matching images/labels, got {len(self.images)}/{len(self.labels)}")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], split or self.split, self.num_classes)


def load_digits() -> LabeledDataset:
    """The bundled UCI optical-digits set: 1,797 8x8 images, 17 gray levels."""
    with resources.files("redcane._data").joinpath("digits.csv.gz").open("rb") as fh:
        raw = np.loadtxt(gzip.open(fh), delimiter=",")
    return LabeledDataset(raw[:, :64].reshape(-1, 8, 8, 1) / 16.0, raw[:, 64].astype(int), "all")


def train_test_split(ds: LabeledDataset, train_fraction: float = 0.8, seed: int = 0):
    order = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    return ds.subset(order[:cut], "train"), ds.subset(order[cut:], "test")


def digits_split(seed: int = 0):
    """80/20 seeded split of the bundled digits."""
    return train_test_split(load_digits(), 0.8, seed)


def _open(path):
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def load_idx(images_path, labels_path, split: str = "train") -> LabeledDataset:
    """Parse an IDX image file (magic 0x803) and label file (magic 0x801)."""
    img = _open(images_path)
    lab = _open(labels_path)
    if len(img) < 16:
        raise ValueError(f"{images_path}: truncated header ({len(img)} bytes)")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(lab) < 8:
        raise ValueError(f"{labels_path}: truncated header ({len(lab)} bytes)")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise ValueError(f"{labels_path}: bad label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if ln != n:
        raise ValueError(f"{n} images but {ln} labels")
    need = 16 + n * rows * cols
    if len(img) < need:
        raise ValueError(f"{images_path}: truncated, expected {need} bytes, found {len(img)}")
    if len(lab) < 8 + n:
        raise ValueError(f"{labels_path}: truncated, expected {8 + n} bytes, found {len(lab)}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8)
    return LabeledDataset(pixels.reshape(n, rows, cols, 1) / 255.0, labels.astype(np.int64), split)


def write_idx(ds_images, labels, images_path, labels_path) -> None:
    """Write uint8 images ``[N, H, W]`` and labels as IDX files."""
    images = np.asarray(ds_images, dtype=np.uint8)
    n, rows, cols = images.shape[:3]
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + np.asarray(labels, np.uint8).tobytes())


def downsample(ds: LabeledDataset, factor: int) -> LabeledDataset:
    """Average-pool images over ``factor`` x ``factor`` blocks (zero-padding ragged edges)."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    x = ds.images
    n, h, w, c = x.shape
    ph, pw = -h % factor, -w % factor
    x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)))
    hh, ww = x.shape[1] // factor, x.shape[2] // factor
    pooled = x.reshape(n, hh, factor, ww, factor, c).mean(axis=(2, 4))
    return LabeledDataset(pooled, ds.labels, ds.split, ds.num_classes)

"""Dataset ingestion: a synthetic generator plus IDX and CSV loaders.

The synthetic set draws k classes of Gaussian blobs on a small multi-channel
canvas.  Each class owns a blob center, width and per-channel amplitude
signature; samples jitter the center and add pixel noise.  Difficulty scales
the noise and jitter together.  Everything is reproducible from a seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = ["Dataset", "synthetic_blobs", "load_idx", "load_csv_images", "make_dataset"]


@dataclass
class Dataset:
    train_x: np.ndarray  # [n, c, h, w] float64
    train_y: np.ndarray  # [n] int64
    val_x: np.ndarray
    val_y: np.ndarray

    @property
    def classes(self) -> int:
        return int(max(self.train_y.max(), self.val_y.max())) + 1

    @property
    def input_shape(self):
        return tuple(self.train_x.shape[1:])


def synthetic_blobs(
    classes: int = 10,
    n_train: int = 2000,
    n_val: int = 500,
    size: int = 16,
    channels: int = 3,
    difficulty: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian-blob images, one blob geometry and color signature per class."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    radius = size * 0.28
    centers = np.stack(
        [size / 2 + radius * np.cos(angles), size / 2 + radius * np.sin(angles)], axis=1
    )
    widths = size * (0.10 + 0.05 * rng.random(classes))
    colors = 0.5 + 0.5 * rng.random((classes, channels))
    noise = 0.18 * difficulty
    jitter = 0.6 * difficulty

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    def draw(n):
        labels = rng.integers(0, classes, n)
        imgs = np.empty((n, channels, size, size))
        for i, k in enumerate(labels):
            cy, cx = centers[k] + jitter * rng.normal(size=2)
            s = widths[k] * (1.0 + 0.15 * rng.normal())
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * s * s))
            imgs[i] = colors[k][:, None, None] * blob[None]
        imgs += noise * rng.normal(size=imgs.shape)
        return imgs, labels.astype(np.int64)

    tx, ty = draw(n_train)
    vx, vy = draw(n_val)
    return Dataset(tx, ty, vx, vy)


def _read_idx(path) -> np.ndarray:
    """Read one IDX file (the MNIST container format)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ConfigError(f"{path}: not an IDX file (too short)")
    zero1, zero2, dtype_code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0:
        raise ConfigError(f"{path}: bad IDX magic {raw[:4]!r}")
    dtypes = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4",
              0x0D: ">f4", 0x0E: ">f8"}
    if dtype_code not in dtypes:
        raise ConfigError(f"{path}: unsupported IDX element type 0x{dtype_code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw[4 + 4 * ndim :], dtype=dtypes[dtype_code])
    if data.size != int(np.prod(dims)):
        raise ConfigError(f"{path}: payload size does not match header dims {dims}")
    return data.reshape(dims)


def load_idx(images_path, labels_path, val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Load an IDX image/label pair and split off a validation set."""
    imgs = _read_idx(images_path).astype(np.float64)
    labels = _read_idx(labels_path).astype(np.int64)
    if imgs.ndim == 3:  # [n, h, w] single channel
        imgs = imgs[:, None, :, :]
    elif imgs.ndim != 4:
        raise ConfigError(f"{images_path}: expected [n,h,w] or [n,c,h,w] images")
    if labels.ndim != 1 or labels.shape[0] != imgs.shape[0]:
        raise ConfigError(
            f"label count {labels.shape} does not match image count {imgs.shape[0]}"
        )
    if imgs.max() > 1.0:
        imgs = imgs / 255.0
    return _split(imgs, labels, val_fraction, seed)


def load_csv_images(path, val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Load a label,pixel,...,pixel CSV of square single-channel images."""
    table = np.genfromtxt(path, delimiter=",", dtype=np.float64)
    if table.ndim == 1:
        table = table[None]
    if np.isnan(table[0]).any():  # header row
        table = table[1:]
    labels = table[:, 0].astype(np.int64)
    pixels = table[:, 1:]
    side = int(round(np.sqrt(pixels.shape[1])))
    if side * side != pixels.shape[1]:
        raise ConfigError(
            f"{path}: {pixels.shape[1]} pixel columns is not a square image"
        )
    imgs = pixels.reshape(-1, 1, side, side)
    if imgs.max() > 1.0:
        imgs = imgs / 255.0
    return _split(imgs, labels, val_fraction, seed)


def _split(imgs, labels, val_fraction, seed) -> Dataset:
    n = imgs.shape[0]
    n_val = max(1, int(round(n * val_fraction)))
    order = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    return Dataset(imgs[train_idx], labels[train_idx], imgs[val_idx], labels[val_idx])


def make_dataset(spec: dict) -> Dataset:
    """Build a dataset from a config mapping with a ``kind`` selector."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"dataset spec must be a mapping with a 'kind' key, got {spec!r}")
    kind = spec["kind"]
    if kind == "synthetic":
        known = {"kind", "classes", "train", "val", "size", "channels", "difficulty", "seed"}
        _reject_unknown(spec, known, "synthetic dataset")
        return synthetic_blobs(
            classes=spec.get("classes", 10),
            n_train=spec.get("train", 2000),
            n_val=spec.get("val", 500),
            size=spec.get("size", 16),
            channels=spec.get("channels", 3),
            difficulty=spec.get("difficulty", 1.0),
            seed=spec.get("seed", 0),
        )
    if kind == "idx":
        known = {"kind", "images", "labels", "val_fraction", "seed"}
        _reject_unknown(spec, known, "idx dataset")
        return load_idx(spec["images"], spec["labels"],
                        spec.get("val_fraction", 0.2), spec.get("seed", 0))
    if kind == "csv":
        known = {"kind", "path", "val_fraction", "seed"}
        _reject_unknown(spec, known, "csv dataset")
        return load_csv_images(spec["path"], spec.get("val_fraction", 0.2),
                               spec.get("seed", 0))
    raise ConfigError(f"unknown dataset kind {kind!r} (expected synthetic, idx or csv)")


def _reject_unknown(spec: dict, known: set, what: str) -> None:
    extra = set(spec) - known
    if extra:
        raise ConfigError(f"unknown {what} keys: {sorted(extra)}")

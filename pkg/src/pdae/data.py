"""Dataset ingestion: IDX files, image directories, and synthetic mixtures.

Images are scaled to [-1, 1] on the way in (pixel 0 -> -1.0, 255 -> +1.0).
Synthetic mixtures are small enough to attach a MixtureOracle, which is how
most verification in this project runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


class IdxFormatError(DataError):
    """Malformed IDX header or truncated payload."""


class ImageReadError(DataError):
    """A file in an image directory could not be decoded."""


class EmptyDatasetError(DataError):
    pass


@dataclass
class Dataset:
    """[N, C, H, W] float32 images in [-1, 1] plus optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if len(self.images) == 0:
            raise EmptyDatasetError("dataset has no items")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DataError("labels length does not match images")

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1


def scale_to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 in [-1, 1], exact at both endpoints."""
    return (pixels.astype(np.float32) / 255.0) * 2.0 - 1.0


_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4",
               0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: str | Path) -> np.ndarray:
    """Parse one IDX file (big-endian, public header layout)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file shorter than an IDX header")
    zeros, dtype_code, ndim = raw[0:2], raw[2], raw[3]
    if zeros != b"\x00\x00":
        raise IdxFormatError(f"{path}: bad magic bytes {zeros!r}")
    if dtype_code not in _IDX_DTYPES:
        raise IdxFormatError(f"{path}: unknown dtype code 0x{dtype_code:02x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(f"{path}: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    arr = np.frombuffer(raw, dtype=_IDX_DTYPES[dtype_code], offset=header_end)
    expected = int(np.prod(dims))
    if arr.size != expected:
        raise IdxFormatError(
            f"{path}: payload has {arr.size} items, header promises {expected}"
        )
    return arr.reshape(dims)


def load_idx_dataset(path: str | Path, labels_path: str | Path | None = None) -> Dataset:
    images = read_idx(path)
    if images.ndim != 3:
        raise IdxFormatError(f"{path}: expected 3-D image tensor, got {images.ndim}-D")
    data = scale_to_unit(np.asarray(images))[:, None, :, :]
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise IdxFormatError(f"{labels_path}: expected 1-D label vector")
        labels = np.asarray(labels, dtype=np.int64)
    return Dataset(data, labels)


def load_image_dir(path: str | Path, image_size: int | None = None,
                   channels: int = 1) -> Dataset:
    """Load every PNG/JPEG under a directory. If the directory contains
    subdirectories, each subdirectory is a class (sorted name order)."""
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{path} is not a readable directory")
    subdirs = sorted(d for d in root.iterdir() if d.is_dir())
    groups = [(i, d) for i, d in enumerate(subdirs)] if subdirs else [(None, root)]
    images, labels = [], []
    for label, d in groups:
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg"):
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("L" if channels == 1 else "RGB")
                    if image_size is not None:
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.uint8)
            except (UnidentifiedImageError, OSError) as e:
                raise ImageReadError(f"cannot decode {f}: {e}") from e
            if arr.ndim == 2:
                arr = arr[None, :, :]
            else:
                arr = arr.transpose(2, 0, 1)
            images.append(scale_to_unit(arr))
            if label is not None:
                labels.append(label)
    if not images:
        raise EmptyDatasetError(f"no readable images under {path}")
    return Dataset(
        np.stack(images),
        np.asarray(labels, dtype=np.int64) if labels else None,
    )


def _smooth_field(rng: np.random.Generator, size: int, n_bumps: int) -> np.ndarray:
    """Random sum of Gaussian bumps on a size x size grid, peak-normalized."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.zeros((size, size))
    for _ in range(n_bumps):
        cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
        width = rng.uniform(0.12, 0.3) * size
        sign = rng.choice([-1.0, 1.0])
        field += sign * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2)))
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def make_synthetic_mixture(
    n_points: int,
    image_size: int = 8,
    channels: int = 1,
    n_classes: int = 1,
    seed: int = 0,
    class_amplitude: float = 0.8,
    jitter: float = 0.25,
) -> Dataset:
    """Finite dataset of smooth blob images: each class gets a prototype
    field, each point adds its own smaller random field. Values stay inside
    [-1, 1], so the result is directly oracle-attachable."""
    if n_points < 1:
        raise DataError("n_points must be >= 1")
    if n_classes < 1 or n_classes > n_points:
        raise DataError("need 1 <= n_classes <= n_points")
    rng = np.random.default_rng(seed)
    prototypes = [
        class_amplitude * _smooth_field(rng, image_size, n_bumps=3)
        for _ in range(n_classes)
    ]
    images = np.empty((n_points, channels, image_size, image_size), dtype=np.float32)
    labels = np.arange(n_points, dtype=np.int64) % n_classes
    for i in range(n_points):
        base = prototypes[labels[i]]
        sample = base + jitter * _smooth_field(rng, image_size, n_bumps=3)
        images[i] = np.clip(sample, -1.0, 1.0).astype(np.float32)
    return Dataset(images, labels)


def ingest_dataset(
    kind: str,
    path: str | None = None,
    labels_path: str | None = None,
    image_size: int | None = None,
    channels: int = 1,
    n_points: int = 16,
    n_classes: int = 1,
    seed: int = 0,
) -> Dataset:
    kind = kind.lower()
    if kind == "idx":
        if path is None:
            raise DataError("idx ingestion needs a path")
        return load_idx_dataset(path, labels_path)
    if kind == "imagedir":
        if path is None:
            raise DataError("imagedir ingestion needs a path")
        return load_image_dir(path, image_size, channels)
    if kind == "synthetic":
        return make_synthetic_mixture(
            n_points, image_size or 8, channels, n_classes, seed
        )
    raise DataError(f"unknown dataset kind {kind!r}")

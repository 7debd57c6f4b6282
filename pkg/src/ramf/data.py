"""Datasets: IDX ingestion, synthetic wedge images, class-incremental splits, batching."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CACHE_MAGIC = b"RAMF"
CACHE_VERSION = 1


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, classes) -> "LabeledDataset":
        mask = np.isin(self.labels, np.asarray(list(classes), dtype=np.int64))
        return LabeledDataset(self.images[mask], self.labels[mask], self.class_count)


@dataclass(frozen=True)
class TaskSplit:
    stage_classes: tuple[tuple[int, ...], ...]
    seed: int

    @property
    def num_stages(self) -> int:
        return len(self.stage_classes)

    def seen(self, stage: int) -> list[int]:
        return [c for s in self.stage_classes[: stage + 1] for c in s]


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise ValueError(f"{path}: bad IDX magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}i", raw[4 : 4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload size {body.size} does not match dims {dims}")
    return body.reshape(dims)


def load_idx(image_path, label_path) -> LabeledDataset:
    """Read an IDX image/label pair. Grayscale is replicated to three channels."""
    images = _read_idx(image_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(label_path, IDX_LABEL_MAGIC).astype(np.int64)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    if images.ndim == 3:
        images = np.repeat(images[:, None], 3, axis=1)
    x = images.astype(np.float64) / 255.0
    k = int(labels.max()) + 1 if len(labels) else 0
    return LabeledDataset(x, labels, k)


def write_idx(image_path, label_path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Write grayscale [N,H,W] uint8 images and labels as IDX files."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    Path(image_path).write_bytes(struct.pack(">4i", IDX_IMAGE_MAGIC, n, h, w) + images_u8.tobytes())
    lab = np.asarray(labels, dtype=np.uint8)
    Path(label_path).write_bytes(struct.pack(">2i", IDX_LABEL_MAGIC, len(lab)) + lab.tobytes())


# ---------------------------------------------------------------------------
# binary cache


def save_cache(path, ds: LabeledDataset) -> None:
    n, c, h, w = ds.images.shape
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    header = CACHE_MAGIC + struct.pack("<6I", CACHE_VERSION, ds.class_count, n, c, h, w)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + pixels.tobytes() + ds.labels.astype(np.uint8).tobytes())
    tmp.replace(path)


def load_cache(path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a dataset cache file")
    version, k, n, c, h, w = struct.unpack("<6I", raw[4:28])
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    size = n * c * h * w
    if len(raw) != 28 + size + n:
        raise ValueError(f"{path}: cache length does not match header")
    pixels = np.frombuffer(raw, np.uint8, size, 28).reshape(n, c, h, w)
    labels = np.frombuffer(raw, np.uint8, n, 28 + size).astype(np.int64)
    return LabeledDataset(pixels.astype(np.float64) / 255.0, labels, int(k))


# ---------------------------------------------------------------------------
# synthetic data


def class_angle(c: int, num_classes: int) -> float:
    """Wedge direction in degrees; never a multiple of 90."""
    return 17.0 + c * (151.0 / num_classes)


def class_colors(c: int, num_classes: int) -> np.ndarray:
    # golden-ratio stride so classes with neighbouring angles get distant hues
    phase = 2 * math.pi * ((c * 0.6180339887498949) % 1.0)
    w = 0.55 + 0.45 * np.cos(phase + np.array([0.0, 2 * math.pi / 3, 4 * math.pi / 3]))
    return w


def synthetic_image(c: int, index: int, num_classes: int, height: int, width: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, c, index])
    theta = math.radians(class_angle(c, num_classes) + rng.uniform(-3.0, 3.0))
    cy = (height - 1) / 2 + rng.uniform(-1.0, 1.0)
    cx = (width - 1) / 2 + rng.uniform(-1.0, 1.0)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    # image rows grow downwards; angles are measured counter-clockwise from +x
    dy, dx = -(yy - cy), xx - cx
    radius = np.hypot(dx, dy)
    diff = np.angle(np.exp(1j * (np.arctan2(dy, dx) - theta)))
    wedge = (np.abs(diff) < math.radians(22.0)) & (radius < 0.48 * min(height, width))
    bar = np.abs(dx * math.sin(theta) - dy * math.cos(theta)) < 0.9
    shape = np.maximum(wedge.astype(float), 0.5 * bar)
    contrast = rng.uniform(0.8, 1.0)
    img = contrast * class_colors(c, num_classes)[:, None, None] * shape[None]
    img = img + rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(
    num_classes: int, per_class: int, height: int = 16, width: int = 16, seed: int = 0
) -> LabeledDataset:
    """Deterministic wedge-pattern dataset; each image depends only on (seed, class, index)."""
    if num_classes < 2 or per_class < 1:
        raise ValueError("need num_classes >= 2 and per_class >= 1")
    images = np.empty((num_classes * per_class, 3, height, width))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    for c in range(num_classes):
        for i in range(per_class):
            images[c * per_class + i] = synthetic_image(c, i, num_classes, height, width, seed)
    return LabeledDataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# splits and batching


def split_incremental(
    class_count: int, initial_count: int, num_stages: int, per_stage: int, seed: int = 0
) -> TaskSplit:
    if initial_count < 1 or num_stages < 0 or per_stage < 1:
        raise ValueError("invalid split sizes")
    if initial_count + num_stages * per_stage > class_count:
        raise ValueError(
            f"{initial_count} + {num_stages}x{per_stage} classes exceed the {class_count} available"
        )
    order = np.random.default_rng(seed).permutation(class_count).tolist()
    stages = [tuple(order[:initial_count])]
    for s in range(num_stages):
        lo = initial_count + s * per_stage
        stages.append(tuple(order[lo : lo + per_stage]))
    return TaskSplit(tuple(stages), seed)


def batch_iter(
    dataset: LabeledDataset, batch_size: int, epoch_seed: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    perm = np.random.default_rng(epoch_seed).permutation(len(dataset))
    for lo in range(0, len(perm), batch_size):
        idx = perm[lo : lo + batch_size]
        yield dataset.images[idx], dataset.labels[idx]

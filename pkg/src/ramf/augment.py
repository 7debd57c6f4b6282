"""Class augmentation: mixed pairs, rotation, cutout, colour permutation.

Every augmentation produces samples with *new* labels. ``LabelSpace`` owns the
mapping from (class, augmentation) to a classifier head index for one stage.
Head layout, in order: old classes, the stage's own classes, pair heads,
rotation heads (3 per class), cutout heads, colour-permutation heads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class AugKind(enum.Enum):
    ROTATION = "rotation"
    CUTOUT = "cutout"
    COLOR_PERM = "color_perm"


AUX_ORDER = (AugKind.ROTATION, AugKind.CUTOUT, AugKind.COLOR_PERM)
ANGLES = (90, 180, 270)
# the five non-identity orderings of (R, G, B): RBG, GRB, GBR, BRG, BGR
COLOR_PERMUTATIONS = ((0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))

ORIGINAL = "original"
BASE_MIX = "base-mix"


def pair_count(k: int) -> int:
    return k * (k - 1) // 2


@dataclass
class LabelSpace:
    """Head-index registry for one training stage."""

    old_classes: tuple[int, ...]
    new_classes: tuple[int, ...]
    pairs: bool = True
    aux_kinds: tuple[AugKind, ...] = AUX_ORDER
    _local: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.old_classes = tuple(int(c) for c in self.old_classes)
        self.new_classes = tuple(int(c) for c in self.new_classes)
        if set(self.old_classes) & set(self.new_classes):
            raise ValueError("new classes overlap previously learned classes")
        if len(set(self.new_classes)) != len(self.new_classes):
            raise ValueError("duplicate class ids")
        self._local = {c: i for i, c in enumerate(self.new_classes)}

    @property
    def k(self) -> int:
        return len(self.new_classes)

    @property
    def original_classes(self) -> tuple[int, ...]:
        return self.old_classes + self.new_classes

    @property
    def num_original(self) -> int:
        return len(self.old_classes) + self.k

    def count(self, kind: str | AugKind) -> int:
        k = self.k
        if kind == "pairs":
            return pair_count(k) if self.pairs else 0
        if kind not in self.aux_kinds:
            return 0
        return 3 * k if kind is AugKind.ROTATION else k

    def _offset(self, kind) -> int:
        off = self.num_original
        for name in ("pairs",) + AUX_ORDER:
            if name == kind:
                return off
            off += self.count(name)
        raise KeyError(kind)

    @property
    def size(self) -> int:
        return self.num_original + self.num_augmented

    @property
    def num_augmented(self) -> int:
        return sum(self.count(kind) for kind in ("pairs",) + AUX_ORDER)

    def class_head(self, c: int) -> int:
        return self.original_classes.index(int(c))

    def class_heads(self, labels) -> np.ndarray:
        table = {c: i for i, c in enumerate(self.original_classes)}
        return np.array([table[int(c)] for c in labels], dtype=np.int64)

    def pair_head(self, a: int, b: int) -> int:
        i, j = sorted((self._local[int(a)], self._local[int(b)]))
        if i == j or not self.pairs:
            raise KeyError((a, b))
        k = self.k
        return self._offset("pairs") + i * k - i * (i + 1) // 2 + (j - i - 1)

    def rotation_head(self, c: int, angle: int) -> int:
        if AugKind.ROTATION not in self.aux_kinds:
            raise KeyError(AugKind.ROTATION)
        return self._offset(AugKind.ROTATION) + 3 * self._local[int(c)] + ANGLES.index(angle)

    def cutout_head(self, c: int) -> int:
        if AugKind.CUTOUT not in self.aux_kinds:
            raise KeyError(AugKind.CUTOUT)
        return self._offset(AugKind.CUTOUT) + self._local[int(c)]

    def colorperm_head(self, c: int) -> int:
        if AugKind.COLOR_PERM not in self.aux_kinds:
            raise KeyError(AugKind.COLOR_PERM)
        return self._offset(AugKind.COLOR_PERM) + self._local[int(c)]

    def is_augmented(self, head: int) -> bool:
        return self.num_original <= head < self.size


@dataclass
class AugBatch:
    images: np.ndarray
    head_labels: np.ndarray
    provenance: list[str]

    def __len__(self) -> int:
        return len(self.head_labels)

    @staticmethod
    def empty(shape: tuple[int, ...]) -> "AugBatch":
        return AugBatch(np.empty((0,) + tuple(shape)), np.empty(0, dtype=np.int64), [])

    @staticmethod
    def concat(parts: Sequence["AugBatch"]) -> "AugBatch":
        return AugBatch(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.head_labels for p in parts]).astype(np.int64),
            [tag for p in parts for tag in p.provenance],
        )


# ---------------------------------------------------------------------------
# primitive image transforms


def mixup(xa: np.ndarray, xb: np.ndarray, lam) -> np.ndarray:
    """lam * xa + (1 - lam) * xb, clamped so rounding never leaves [min, max] of the inputs."""
    out = lam * xa + (1.0 - lam) * xb
    return np.clip(out, np.minimum(xa, xb), np.maximum(xa, xb))


def rotate90(img: np.ndarray, times: int = 1) -> np.ndarray:
    """Clockwise rotation of a [..., H, W] array: out[r][c] = in[H-1-c][r]."""
    if img.shape[-1] != img.shape[-2]:
        raise ValueError("rotation requires square images")
    return np.rot90(img, k=-times, axes=(-2, -1)).copy()


def cutout(img: np.ndarray, top: int, left: int, size_h: int, size_w: int) -> np.ndarray:
    out = img.copy()
    out[..., max(top, 0) : max(top + size_h, 0), max(left, 0) : max(left + size_w, 0)] = 0.0
    return out


def permute_channels(img: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    if img.shape[-3] != 3:
        raise ValueError("colour permutation requires 3 channels")
    return img[..., list(perm), :, :].copy()


def inverse_permutation(perm: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)


# ---------------------------------------------------------------------------
# class augmentations over a batch


def base_class_aug(
    images: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    label_space: LabelSpace,
    lambda_range: tuple[float, float] = (0.4, 0.6),
) -> AugBatch:
    """Mix each sample with a shuffled partner; different-class pairs get a pair head."""
    n = len(labels)
    perm = rng.permutation(n)
    lams = rng.uniform(lambda_range[0], lambda_range[1], size=n)
    keep = labels != labels[perm]
    if not label_space.pairs or not keep.any():
        return AugBatch.empty(images.shape[1:])
    idx = np.flatnonzero(keep)
    lam = lams[idx][:, None, None, None]
    mixed = mixup(images[idx], images[perm[idx]], lam)
    heads = np.array([label_space.pair_head(labels[i], labels[perm[i]]) for i in idx], dtype=np.int64)
    return AugBatch(mixed, heads, [BASE_MIX] * len(idx))


def rotation_aug(images: np.ndarray, labels: np.ndarray, label_space: LabelSpace) -> AugBatch:
    parts = []
    for times, angle in enumerate(ANGLES, start=1):
        heads = np.array([label_space.rotation_head(c, angle) for c in labels], dtype=np.int64)
        parts.append(AugBatch(rotate90(images, times), heads, [f"rotation-{angle}"] * len(labels)))
    return AugBatch.concat(parts)


def cutout_aug(
    images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, label_space: LabelSpace
) -> AugBatch:
    n, _, h, w = images.shape
    sh, sw = h // 2, w // 2
    # centre uniform over the image; the square is clipped at the borders
    cy = rng.integers(0, h, size=n)
    cx = rng.integers(0, w, size=n)
    out = np.empty_like(images)
    for i in range(n):
        out[i] = cutout(images[i], cy[i] - sh // 2, cx[i] - sw // 2, sh, sw)
    heads = np.array([label_space.cutout_head(c) for c in labels], dtype=np.int64)
    return AugBatch(out, heads, [AugKind.CUTOUT.value] * n)


def color_perm_aug(
    images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, label_space: LabelSpace
) -> AugBatch:
    if images.shape[1] != 3:
        raise ValueError("colour permutation requires 3 channels")
    choice = rng.integers(0, len(COLOR_PERMUTATIONS), size=len(labels))
    out = np.stack([permute_channels(img, COLOR_PERMUTATIONS[j]) for img, j in zip(images, choice)])
    heads = np.array([label_space.colorperm_head(c) for c in labels], dtype=np.int64)
    return AugBatch(out, heads, [AugKind.COLOR_PERM.value] * len(labels))


def select_auxiliary(weights: Sequence[float], rng: np.random.Generator) -> AugKind:
    """Weighted draw over (rotation, cutout, colour permutation)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or (w < 0).any() or w.sum() <= 0:
        raise ValueError(f"invalid auxiliary weights {weights!r}")
    return AUX_ORDER[int(rng.choice(3, p=w / w.sum()))]


def compose_batch(
    images: np.ndarray,
    labels: np.ndarray,
    stage_kind: str,
    label_space: LabelSpace,
    mix_rng: np.random.Generator,
    aux_rng: np.random.Generator,
    weights: Sequence[float] = (8, 1, 1),
    base_aug: bool = True,
    aux_aug: bool = True,
    lambda_range: tuple[float, float] = (0.4, 0.6),
) -> AugBatch:
    """Originals + Base ClassAug + one auxiliary augmentation.

    The initial stage draws the auxiliary kind per batch from ``weights``;
    incremental stages always rotate.
    """
    if stage_kind not in ("initial", "incremental"):
        raise ValueError(f"unknown stage kind {stage_kind!r}")
    parts = [AugBatch(images, label_space.class_heads(labels), [ORIGINAL] * len(labels))]
    if base_aug:
        parts.append(base_class_aug(images, labels, mix_rng, label_space, lambda_range))
    if aux_aug:
        if stage_kind == "initial":
            kind = select_auxiliary(weights, aux_rng)
        else:
            kind = AugKind.ROTATION
        if kind is AugKind.ROTATION:
            parts.append(rotation_aug(images, labels, label_space))
        elif kind is AugKind.CUTOUT:
            parts.append(cutout_aug(images, labels, aux_rng, label_space))
        else:
            parts.append(color_perm_aug(images, labels, aux_rng, label_space))
    return AugBatch.concat(parts)

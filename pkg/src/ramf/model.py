"""Feature extractor, cosine classifier, mixed features and prototype store."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

CHANNELS = (3, 16, 32, 64)
CHECKPOINT_MAGIC = b"RAMFMODL"
CHECKPOINT_VERSION = 1


class FeatureExtractor:
    """Three conv-relu-pool blocks followed by a linear projection to ``dim``."""

    def __init__(self, rng: np.random.Generator, image_size: int = 16, dim: int = 64):
        if image_size % 8:
            raise ValueError("image side must be a multiple of 8")
        self.image_size = image_size
        self.dim = dim
        self.kernels = []
        for i, (cin, cout) in enumerate(zip(CHANNELS[:-1], CHANNELS[1:])):
            std = np.sqrt(2.0 / (cin * 9))
            self.kernels.append(Parameter(rng.normal(0, std, (cout, cin, 3, 3)), name=f"conv{i}"))
        flat = CHANNELS[-1] * (image_size // 8) ** 2
        self.proj_w = Parameter(rng.normal(0, np.sqrt(1.0 / flat), (dim, flat)), name="proj_w")
        self.proj_b = Parameter(np.zeros(dim), name="proj_b")

    def parameters(self) -> list[Parameter]:
        return [*self.kernels, self.proj_w, self.proj_b]

    def __call__(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2] != x.shape[3]:
            raise ValueError(f"expected [N,3,S,S] images, got {x.shape}")
        if x.shape[2] != self.image_size:
            raise ValueError(f"extractor built for {self.image_size}px images, got {x.shape[2]}")
        for k in self.kernels:
            x = ad.avg_pool2d(ad.relu(ad.conv2d(x, k, padding=1)))
        return ad.linear(ad.flatten(x), self.proj_w, self.proj_b)

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot(self)


class ModelSnapshot:
    """Frozen copy of an extractor. Its outputs never carry gradient."""

    def __init__(self, extractor: FeatureExtractor):
        self._net = FeatureExtractor.__new__(FeatureExtractor)
        self._net.image_size = extractor.image_size
        self._net.dim = extractor.dim
        self._net.kernels = [_frozen(k) for k in extractor.kernels]
        self._net.proj_w = _frozen(extractor.proj_w)
        self._net.proj_b = _frozen(extractor.proj_b)

    def __call__(self, images) -> Tensor:
        return Tensor(self._net(np.asarray(images)).data)

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self._net.parameters()]


def _frozen(p: Parameter) -> Tensor:
    data = p.data.copy()
    data.flags.writeable = False
    return Tensor(data)


def extract(extractor, images) -> np.ndarray:
    return extractor(np.asarray(images)).data


# ---------------------------------------------------------------------------
# classifier


class CosineClassifier:
    """Heads scored by eta * cos(theta_i, f), or by theta_i . f + b in linear mode."""

    def __init__(
        self,
        dim: int,
        num_heads: int,
        rng: np.random.Generator,
        mode: str = "cosine",
        eta: float = 10.0,
        init_std: float = 0.01,
    ):
        if mode not in ("cosine", "linear"):
            raise ValueError(f"unknown classifier mode {mode!r}")
        self.dim = dim
        self.mode = mode
        self.init_std = init_std
        self.weight = Parameter(rng.normal(0, init_std, (num_heads, dim)), name="heads")
        self.bias = Parameter(np.zeros(num_heads), name="head_bias") if mode == "linear" else None
        self.eta = Parameter(np.array([eta]), name="eta", decay=False, floor=0.01)

    @property
    def num_heads(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Parameter]:
        if self.mode == "cosine":
            return [self.weight, self.eta]
        return [self.weight, self.bias]

    def logits(self, features: Tensor) -> Tensor:
        if features.shape[1] != self.dim:
            raise ValueError(f"feature width {features.shape[1]} != {self.dim}")
        if self.mode == "linear":
            return ad.linear(features, self.weight, self.bias)
        cos = ad.linear(ad.l2_normalize(features), ad.l2_normalize(self.weight))
        return ad.mul(cos, self.eta)

    def add_heads(self, count: int, rng: np.random.Generator) -> None:
        if count < 0:
            raise ValueError("count must be nonnegative")
        if count == 0:
            return
        new = rng.normal(0, self.init_std, (count, self.dim))
        self.weight = Parameter(np.concatenate([self.weight.data, new]), name="heads")
        if self.bias is not None:
            self.bias = Parameter(np.concatenate([self.bias.data, np.zeros(count)]), name="head_bias")

    def keep_heads(self, n: int) -> None:
        """Truncate to the first ``n`` heads (the original-class heads)."""
        self.weight = Parameter(self.weight.data[:n], name="heads")
        if self.bias is not None:
            self.bias = Parameter(self.bias.data[:n], name="head_bias")


def classify(classifier: CosineClassifier, features) -> np.ndarray:
    f = features if isinstance(features, Tensor) else Tensor(features)
    return ad.softmax(classifier.logits(f).data)


def drop_aug_heads(classifier: CosineClassifier, label_space) -> None:
    if classifier.num_heads != label_space.size:
        raise ValueError("classifier head count does not match the label space")
    classifier.keep_heads(label_space.num_original)


def mix_features(f_t: Tensor, f_prev: Tensor, lam: float, mu: float) -> Tensor:
    """lam * f_t + mu * f_prev with gradient only through ``f_t``."""
    if f_t.shape != f_prev.shape:
        raise ValueError(f"shape mismatch {f_t.shape} vs {f_prev.shape}")
    return ad.add(ad.scale(f_t, lam), Tensor(mu * f_prev.data))


# ---------------------------------------------------------------------------
# prototypes


@dataclass
class PrototypeStore:
    prototypes: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.prototypes)

    def __contains__(self, c) -> bool:
        return int(c) in self.prototypes

    def classes(self) -> list[int]:
        return list(self.prototypes)

    def add(self, c: int, prototype: np.ndarray, count: int) -> None:
        if int(c) in self.prototypes:
            raise ValueError(f"prototype for class {c} already stored")
        self.prototypes[int(c)] = np.array(prototype, copy=True)
        self.counts[int(c)] = int(count)

    def matrix(self, classes) -> np.ndarray:
        return np.stack([self.prototypes[int(c)] for c in classes])


def compute_prototypes(extractor, images: np.ndarray, labels: np.ndarray, classes, batch: int = 256):
    """Per-class mean feature under ``extractor``; returns {class: (mean, count)}."""
    feats = np.concatenate([extract(extractor, images[i : i + batch]) for i in range(0, len(images), batch)])
    out = {}
    for c in classes:
        mask = labels == c
        if not mask.any():
            raise ValueError(f"class {c} has no samples")
        out[int(c)] = (feats[mask].mean(axis=0), int(mask.sum()))
    return out


def noisy_prototype(prototype: np.ndarray, rng: np.random.Generator, r_min: float, r_max: float) -> np.ndarray:
    if r_min < 0 or r_min > r_max:
        raise ValueError("need 0 <= r_min <= r_max")
    r = rng.uniform(r_min, r_max)
    return prototype + rng.standard_normal(prototype.shape) * r


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(path, extractor: FeatureExtractor, classifier: CosineClassifier) -> None:
    params = extractor.parameters() + classifier.parameters()
    header = CHECKPOINT_MAGIC + struct.pack("<3I", CHECKPOINT_VERSION, extractor.dim, classifier.num_heads)
    body = b"".join(p.data.astype("<f8").tobytes() for p in params)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)


def load_checkpoint(path, extractor: FeatureExtractor, classifier: CosineClassifier) -> None:
    """Fill existing modules from a checkpoint; shapes must already match."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, dim, heads = struct.unpack("<3I", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if dim != extractor.dim:
        raise ValueError(f"{path}: feature width {dim} != {extractor.dim}")
    if heads != classifier.num_heads:
        classifier.keep_heads(0)
        classifier.add_heads(heads, np.random.default_rng(0))
    offset = 20
    for p in extractor.parameters() + classifier.parameters():
        n = p.data.size * 8
        p.data = np.frombuffer(raw, "<f8", p.data.size, offset).reshape(p.shape).astype(np.float64)
        offset += n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")

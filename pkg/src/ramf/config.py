"""Experiment configuration: JSON in, validated dataclasses out.

Schema (all keys optional except where noted; unknown keys are rejected)::

    {
      "method": "ramf" | "baseline" | "finetune",
      "seed": 0,
      "output_dir": "runs/desk",
      "data": {"source": "synthetic", "classes": 10, "per_class": 200, "test_per_class": 50,
               "size": 16, "train_seed": 0, "test_seed": 1}
          or  {"source": "idx", "train_images": ..., "train_labels": ..., "test_images": ..., "test_labels": ...}
          or  {"source": "cache", "train": ..., "test": ...},
      "split": {"initial": 5, "stages": 5, "per_stage": 1, "seed": null},
      "initial": {StageConfig fields}, "incremental": {StageConfig fields},
      "params": {"mix_lambda": ..., "w_proto": ..., "noise_range": [lo, hi], ...},
      "toggles": {"kd": false, ...},          # applied on top of the method preset
      "reference": true,                      # train per-task experts for intransigence
      "ablation_seeds": [0, 1, 2]
    }

``split.seed = null`` means "use the run seed".
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .trainer import PRESETS, MethodConfig, StageConfig, Toggles


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    classes: int = 10
    per_class: int = 200
    test_per_class: int = 50
    size: int = 16
    train_seed: int = 0
    test_seed: int = 1
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train: str | None = None
    test: str | None = None

    def __post_init__(self):
        need = {
            "synthetic": (),
            "idx": ("train_images", "train_labels", "test_images", "test_labels"),
            "cache": ("train", "test"),
        }
        if self.source not in need:
            raise ConfigError(f"data.source must be one of {sorted(need)}, got {self.source!r}")
        missing = [k for k in need[self.source] if getattr(self, k) is None]
        if missing:
            raise ConfigError(f"data.source={self.source} requires {', '.join('data.' + m for m in missing)}")
        if self.source == "synthetic" and (self.classes < 2 or self.per_class < 1 or self.test_per_class < 1):
            raise ConfigError("synthetic data needs classes >= 2 and positive per-class counts")


@dataclass(frozen=True)
class SplitConfig:
    initial: int = 5
    stages: int = 5
    per_stage: int = 1
    seed: int | None = None


@dataclass(frozen=True)
class ParamsConfig:
    mix_lambda: float = 0.7
    mix_mu: float = 0.3
    w_proto: float = 10.0
    w_kd: float = 10.0
    aux_weights: tuple[float, float, float] = (8.0, 1.0, 1.0)
    noise_range: tuple[float, float] = (0.5, 1.5)
    lambda_range: tuple[float, float] = (0.4, 0.6)
    kd_on_augmented: bool = True
    feature_dim: int = 64
    eta_init: float = 10.0


@dataclass(frozen=True)
class TogglesConfig:
    base_aug: bool | None = None
    aux_aug: bool | None = None
    mixed_feature: bool | None = None
    prototypes: bool | None = None
    kd: bool | None = None
    cosine_mode: bool | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "ramf"
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = DataConfig()
    split: SplitConfig = SplitConfig()
    initial: StageConfig = StageConfig(epochs=30)
    incremental: StageConfig = StageConfig(epochs=10, lr_max=1e-3, lr_min=1e-5, weight_decay=1e-4)
    params: ParamsConfig = ParamsConfig()
    toggles: TogglesConfig = TogglesConfig()
    reference: bool = True
    ablation_seeds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.method not in PRESETS:
            raise ConfigError(f"method must be one of {sorted(PRESETS)}, got {self.method!r}")
        for name in ("initial", "incremental"):
            sc = getattr(self, name)
            if sc.epochs < 1 or sc.batch_size < 2:
                raise ConfigError(f"{name}: epochs must be >= 1 and batch_size >= 2")
            if not 0 < sc.lr_min <= sc.lr_max:
                raise ConfigError(f"{name}: need 0 < lr_min <= lr_max")
            if sc.max_grad_norm is not None and sc.max_grad_norm <= 0:
                raise ConfigError(f"{name}: max_grad_norm must be positive")
        s = self.split
        if s.initial < 1 or s.stages < 0 or s.per_stage < 1:
            raise ConfigError("split sizes must be positive")
        if self.data.source == "synthetic" and s.initial + s.stages * s.per_stage > self.data.classes:
            raise ConfigError(
                f"split needs {s.initial + s.stages * s.per_stage} classes but data.classes={self.data.classes}"
            )
        lo, hi = self.params.noise_range
        if not 0 <= lo <= hi:
            raise ConfigError("params.noise_range must satisfy 0 <= lo <= hi")

    @property
    def split_seed(self) -> int:
        return self.seed if self.split.seed is None else self.split.seed

    def resolved_toggles(self) -> Toggles:
        base = PRESETS[self.method]
        changes = {k: v for k, v in dataclasses.asdict(self.toggles).items() if v is not None}
        return dataclasses.replace(base, **changes)

    def method_config(self, toggles: Toggles | None = None) -> MethodConfig:
        try:
            return MethodConfig(
                toggles=self.resolved_toggles() if toggles is None else toggles,
                initial=self.initial,
                incremental=self.incremental,
                **dataclasses.asdict(self.params),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# strict conversion from plain JSON values


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type {tp}")


def _build(cls, raw, where: str = ""):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(raw) - fields)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        kwargs[name] = _convert(hints[name], value, f"{where}.{name}" if where else name)
    if cls is StageConfig and "epochs" not in kwargs:
        raise ConfigError(f"{where}: epochs is required")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _defaults_as_dict() -> dict:
    return json.loads(json.dumps(dataclasses.asdict(ExperimentConfig())))


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value``; the value is parsed as JSON, falling back to a bare string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(raw: dict, overrides) -> dict:
    out = json.loads(json.dumps(raw))
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[path[-1]] = value
    return out


def from_dict(raw: dict, overrides=()) -> ExperimentConfig:
    """Defaults, then ``raw``, then ``key=value`` overrides; validated."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    merged = _merge(_defaults_as_dict(), apply_overrides(raw, overrides))
    return _build(ExperimentConfig, merged)


def load(path, overrides=()) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return from_dict(raw, overrides)

"""Stage-wise training: initial stage, incremental stages, evaluation, full runs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .augment import AUX_ORDER, AugKind, LabelSpace, compose_batch
from .autodiff import Schedule, Tensor
from .data import LabeledDataset, TaskSplit, batch_iter
from .metrics import AccuracyMatrix, confusion_matrix
from .model import (
    CosineClassifier,
    FeatureExtractor,
    ModelSnapshot,
    PrototypeStore,
    compute_prototypes,
    drop_aug_heads,
    mix_features,
    noisy_prototype,
)

log = logging.getLogger(__name__)

# independent random streams, keyed by (seed, stage, purpose)
INIT, ORDER, MIX, AUX, PROTO, HEADS = range(6)


def stream(seed: int, stage: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, purpose])


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Toggles:
    base_aug: bool = True
    aux_aug: bool = True
    mixed_feature: bool = True
    prototypes: bool = True
    kd: bool = True
    cosine_mode: bool = True


PRESETS = {
    "ramf": Toggles(),
    "baseline": Toggles(base_aug=False, aux_aug=False, mixed_feature=False),
    "finetune": Toggles(False, False, False, False, False, True),
}

# module ablation variants, in reporting order
ABLATION_VARIANTS = {
    "Baseline": PRESETS["baseline"],
    "+BaseClassAug": Toggles(aux_aug=False, mixed_feature=False),
    "+MF": Toggles(aux_aug=False),
    "+AC": Toggles(mixed_feature=False),
    "+MF+AC": Toggles(),
}


@dataclass(frozen=True)
class StageConfig:
    epochs: int
    batch_size: int = 64
    lr_max: float = 0.1
    lr_min: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_grad_norm: float | None = None

    def schedule(self, steps_per_epoch: int) -> Schedule:
        return Schedule(self.lr_max, self.lr_min, self.epochs * steps_per_epoch, self.momentum, self.weight_decay)


@dataclass(frozen=True)
class MethodConfig:
    toggles: Toggles = Toggles()
    initial: StageConfig = StageConfig(epochs=30)
    incremental: StageConfig = StageConfig(epochs=10, lr_max=1e-3, lr_min=1e-5, weight_decay=1e-4)
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

    def __post_init__(self):
        if self.mix_lambda < 0 or self.mix_mu < 0:
            raise ValueError("mix coefficients must be nonnegative")
        if self.w_proto < 0 or self.w_kd < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainState:
    extractor: FeatureExtractor
    classifier: CosineClassifier
    prototypes: PrototypeStore
    seen: list[int]
    stage_index: int
    seed: int
    snapshot: ModelSnapshot | None = None
    label_space: LabelSpace | None = None
    history: list[list[float]] = field(default_factory=list)  # per stage, mean loss per epoch


# ---------------------------------------------------------------------------
# losses


def loss_total(l_ce, l_proto, l_kd, w_proto: float, w_kd: float):
    """l_ce + w_proto * l_proto + w_kd * l_kd; accepts floats or scalar Tensors."""
    for part in (l_ce, l_proto, l_kd):
        v = float(part.data) if isinstance(part, Tensor) else float(part)
        if not math.isfinite(v):
            raise TrainingDiverged(f"non-finite loss component {v}")
    if not any(isinstance(p, Tensor) for p in (l_ce, l_proto, l_kd)):
        return l_ce + w_proto * l_proto + w_kd * l_kd
    out = l_ce if isinstance(l_ce, Tensor) else Tensor(l_ce)
    for part, w in ((l_proto, w_proto), (l_kd, w_kd)):
        if isinstance(part, Tensor):
            out = ad.add(out, ad.scale(part, w))
        elif part:
            out = ad.add(out, Tensor(w * part))
    return out


def loss_kd(f_t: Tensor, f_prev: Tensor) -> Tensor:
    """Mean per-sample Euclidean distance to the frozen features."""
    if f_t.shape != f_prev.shape:
        raise ValueError(f"shape mismatch {f_t.shape} vs {f_prev.shape}")
    return ad.mean(ad.row_norm(ad.add(f_t, Tensor(-f_prev.data))))


def draw_prototypes(store: PrototypeStore, classes, rng, r_min: float, r_max: float) -> np.ndarray:
    return np.stack([noisy_prototype(store.prototypes[c], rng, r_min, r_max) for c in classes])


def loss_proto(classifier: CosineClassifier, store: PrototypeStore, heads, rng, r_min: float, r_max: float):
    """Cross-entropy of one noisy prototype per stored class against its head.

    ``heads`` maps each stored class (in store order) to its classifier head.
    Returns (loss, drawn prototypes).
    """
    if len(store) == 0:
        raise ValueError("prototype store is empty")
    protos = draw_prototypes(store, store.classes(), rng, r_min, r_max)
    return ad.softmax_cross_entropy(classifier.logits(Tensor(protos)), heads), protos


# ---------------------------------------------------------------------------
# stages


def _label_space(old, new, toggles: Toggles, stage_kind: str) -> LabelSpace:
    if not toggles.aux_aug:
        kinds: tuple[AugKind, ...] = ()
    elif stage_kind == "initial":
        kinds = AUX_ORDER
    else:
        kinds = (AugKind.ROTATION,)
    return LabelSpace(tuple(old), tuple(new), pairs=toggles.base_aug, aux_kinds=kinds)


def _steps_per_epoch(n: int, batch: int) -> int:
    return -(-n // batch)


def _check_finite(loss: Tensor, stage: int) -> float:
    v = float(loss.data)
    if not math.isfinite(v):
        raise TrainingDiverged(f"non-finite loss at stage {stage}")
    return v


def train_initial(cfg: MethodConfig, data: LabeledDataset, seed: int, classes=None) -> TrainState:
    """First stage: cross-entropy over original and augmented heads, then prototypes."""
    if len(data) == 0:
        raise ValueError("no training data for the initial stage")
    classes = sorted(set(data.labels.tolist())) if classes is None else list(classes)
    tg = cfg.toggles
    ls = _label_space((), classes, tg, "initial")
    side = data.images.shape[-1]
    extractor = FeatureExtractor(stream(seed, 0, INIT), side, cfg.feature_dim)
    classifier = CosineClassifier(
        cfg.feature_dim, ls.size, stream(seed, 0, HEADS), "cosine" if tg.cosine_mode else "linear", cfg.eta_init
    )
    sc = cfg.initial
    schedule = sc.schedule(_steps_per_epoch(len(data), sc.batch_size))
    params = extractor.parameters() + classifier.parameters()
    order, mix_rng, aux_rng = stream(seed, 0, ORDER), stream(seed, 0, MIX), stream(seed, 0, AUX)
    step, epoch_losses = 0, []
    for epoch in range(sc.epochs):
        losses = []
        for x, y in batch_iter(data, sc.batch_size, int(order.integers(2**32))):
            batch = compose_batch(
                x, y, "initial", ls, mix_rng, aux_rng, cfg.aux_weights, tg.base_aug, tg.aux_aug, cfg.lambda_range
            )
            loss = ad.softmax_cross_entropy(classifier.logits(extractor(batch.images)), batch.head_labels)
            losses.append(_check_finite(loss, 0))
            loss.backward()
            ad.sgd_step(params, schedule, step, sc.max_grad_norm)
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        log.debug("stage 0 epoch %d loss %.4f", epoch, epoch_losses[-1])
    drop_aug_heads(classifier, ls)
    store = PrototypeStore()
    for c, (proto, n) in compute_prototypes(extractor, data.images, data.labels, classes).items():
        store.add(c, proto, n)
    return TrainState(extractor, classifier, store, list(classes), 1, seed, None, ls, [epoch_losses])


def incremental_losses(state: TrainState, cfg: MethodConfig, batch, snapshot, proto_rng, old_heads):
    """Loss terms for one composed incremental batch.

    Returns (total, ce, proto, kd) where total is a Tensor ready for backward.
    """
    tg = cfg.toggles
    f_t = state.extractor(batch.images)
    f_prev = snapshot(batch.images) if (tg.mixed_feature or tg.kd) else None
    f_used = mix_features(f_t, f_prev, cfg.mix_lambda, cfg.mix_mu) if tg.mixed_feature else f_t
    l_ce = ad.softmax_cross_entropy(state.classifier.logits(f_used), batch.head_labels)
    l_proto: Tensor | float = 0.0
    if tg.prototypes and len(state.prototypes):
        r_min, r_max = cfg.noise_range
        l_proto, _ = loss_proto(state.classifier, state.prototypes, old_heads, proto_rng, r_min, r_max)
    l_kd: Tensor | float = 0.0
    if tg.kd:
        if cfg.kd_on_augmented:
            l_kd = loss_kd(f_t, f_prev)
        else:
            keep = np.array([p == "original" for p in batch.provenance])
            rows = np.flatnonzero(keep)
            l_kd = ad.mean(ad.row_norm(ad.add(_rows(f_t, rows), Tensor(-f_prev.data[rows]))))
    total = loss_total(l_ce, l_proto, l_kd, cfg.w_proto, cfg.w_kd)
    return total, l_ce, l_proto, l_kd


def _rows(t: Tensor, rows: np.ndarray) -> Tensor:
    def backward(g):
        out = np.zeros_like(t.data)
        out[rows] = g
        return (out,)

    return ad._node(t.data[rows], (t,), backward)


def train_incremental(state: TrainState, data: LabeledDataset, cfg: MethodConfig, classes=None) -> TrainState:
    """One incremental stage; mutates and returns ``state``."""
    classes = sorted(set(data.labels.tolist())) if classes is None else list(classes)
    if set(classes) & set(state.seen):
        raise ValueError("stage classes overlap previously learned classes")
    if len(data) == 0:
        raise ValueError("no training data for this stage")
    tg = cfg.toggles
    t = state.stage_index
    state.snapshot = state.extractor.snapshot()
    ls = _label_space(state.seen, classes, tg, "incremental")
    state.classifier.add_heads(ls.size - state.classifier.num_heads, stream(state.seed, t, HEADS))
    state.label_space = ls
    old_heads = ls.class_heads(state.prototypes.classes())
    sc = cfg.incremental
    schedule = sc.schedule(_steps_per_epoch(len(data), sc.batch_size))
    params = state.extractor.parameters() + state.classifier.parameters()
    order, mix_rng = stream(state.seed, t, ORDER), stream(state.seed, t, MIX)
    aux_rng, proto_rng = stream(state.seed, t, AUX), stream(state.seed, t, PROTO)
    step, epoch_losses = 0, []
    for _ in range(sc.epochs):
        losses = []
        for x, y in batch_iter(data, sc.batch_size, int(order.integers(2**32))):
            batch = compose_batch(
                x, y, "incremental", ls, mix_rng, aux_rng, cfg.aux_weights, tg.base_aug, tg.aux_aug, cfg.lambda_range
            )
            total, *_ = incremental_losses(state, cfg, batch, state.snapshot, proto_rng, old_heads)
            losses.append(_check_finite(total, t))
            total.backward()
            ad.sgd_step(params, schedule, step, sc.max_grad_norm)
            step += 1
        epoch_losses.append(float(np.mean(losses)))
    drop_aug_heads(state.classifier, ls)
    for c, (proto, n) in compute_prototypes(state.extractor, data.images, data.labels, classes).items():
        state.prototypes.add(c, proto, n)
    state.seen.extend(classes)
    state.stage_index += 1
    state.history.append(epoch_losses)
    return state


# ---------------------------------------------------------------------------
# evaluation and full runs


@dataclass
class StageEval:
    task_accuracies: list[float]
    overall: float
    predictions: np.ndarray  # global class ids
    labels: np.ndarray
    features: np.ndarray


def predict(state: TrainState, images: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    feats = np.concatenate([state.extractor(images[i : i + batch]).data for i in range(0, len(images), batch)])
    logits = state.classifier.logits(Tensor(feats)).data
    seen = np.asarray(state.seen)
    return seen[logits.argmax(axis=1)], feats


def evaluate(state: TrainState, test: LabeledDataset, split: TaskSplit) -> StageEval:
    """Accuracy per learned task, using the current extractor alone."""
    stages = split.stage_classes[: state.stage_index]
    sub = test.subset([c for s in stages for c in s])
    pred, feats = predict(state, sub.images)
    correct = pred == sub.labels
    per_task = []
    for s in stages:
        mask = np.isin(sub.labels, s)
        per_task.append(float(correct[mask].mean()) if mask.any() else 0.0)
    return StageEval(per_task, float(correct.mean()), pred, sub.labels, feats)


def train_expert(cfg: MethodConfig, data: LabeledDataset, seed: int, task: int) -> TrainState:
    plain = replace(cfg, toggles=Toggles(False, False, False, False, False, cfg.toggles.cosine_mode))
    return train_initial(plain, data, seed * 1000 + 17 + task)


def reference_accuracies(cfg: MethodConfig, train: LabeledDataset, test: LabeledDataset, split: TaskSplit, seed: int):
    """Per-task accuracy of a from-scratch expert on each task alone."""
    refs = []
    for i, classes in enumerate(split.stage_classes):
        if len(classes) == 1:
            # a one-class expert predicts its only class
            refs.append(1.0)
            continue
        expert = train_expert(cfg, train.subset(classes), seed, i)
        sub = test.subset(classes)
        pred, _ = predict(expert, sub.images)
        refs.append(float((pred == sub.labels).mean()))
    return refs


@dataclass
class ExperimentResult:
    matrix: AccuracyMatrix
    evals: list[StageEval]
    reference: list[float] | None
    state: TrainState
    split: TaskSplit

    @property
    def confusion(self) -> np.ndarray:
        last = self.evals[-1]
        seen = self.split.seen(len(self.evals) - 1)
        index = {c: i for i, c in enumerate(seen)}
        return confusion_matrix(
            [index[int(p)] for p in last.predictions], [index[int(y)] for y in last.labels], len(seen)
        )


def run_experiment(
    cfg: MethodConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    split: TaskSplit,
    seed: int,
    reference: list[float] | None = None,
    with_reference: bool = True,
    initial_state: TrainState | None = None,
) -> ExperimentResult:
    """Initial stage, then every incremental stage, evaluating after each."""
    matrix = AccuracyMatrix(split.num_stages)
    evals = []
    if initial_state is None:
        state = train_initial(cfg, train.subset(split.stage_classes[0]), seed, split.stage_classes[0])
    else:
        state = initial_state
    for t in range(split.num_stages):
        if t > 0:
            classes = split.stage_classes[t]
            state = train_incremental(state, train.subset(classes), cfg, classes)
        ev = evaluate(state, test, split)
        matrix.record(t + 1, ev.task_accuracies, ev.overall)
        evals.append(ev)
        log.info("stage %d overall accuracy %.4f", t + 1, ev.overall)
    if reference is None and with_reference:
        reference = reference_accuracies(cfg, train, test, split, seed)
    return ExperimentResult(matrix, evals, reference, state, split)

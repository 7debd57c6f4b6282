"""Continual-learning metrics: average accuracy, forgetting, intransigence.

Stages and tasks are 1-based in the public functions to match the usual
notation a[t, i] = accuracy on task i after learning t tasks.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

FORGETTING_CONVENTION = (
    "F_t = mean over i<t of (max_{k<t} a[k,i] - a[t,i]); positive values mean accuracy was lost"
)
INTRANSIGENCE_REFERENCE = (
    "a*_i = accuracy on task i of an expert with the same architecture and initial-stage budget, "
    "trained from scratch on task i's training data alone"
)


@dataclass
class AccuracyMatrix:
    """Lower-triangular a[t, i] plus the overall accuracy o_t per stage.

    Values are stored at six significant digits so the CSV form round-trips
    exactly.
    """

    num_tasks: int
    entries: np.ndarray = field(init=False)
    overall: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.entries = np.full((self.num_tasks, self.num_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows, overall=None) -> "AccuracyMatrix":
        m = cls(len(rows))
        for t, row in enumerate(rows, start=1):
            m.record(t, row, None if overall is None else overall[t - 1])
        return m

    def record(self, t: int, task_accuracies, overall: float | None = None) -> None:
        acc = np.array([quantize(v) for v in np.ravel(task_accuracies)])
        if acc.shape != (t,):
            raise ValueError(f"stage {t} needs {t} task accuracies, got {acc.shape}")
        if ((acc < 0) | (acc > 1)).any():
            raise ValueError("accuracies must lie in [0, 1]")
        self.entries[t - 1, :t] = acc
        if overall is not None:
            if len(self.overall) != t - 1:
                raise ValueError("overall accuracies must be recorded in stage order")
            self.overall.append(quantize(overall))

    def row(self, t: int) -> np.ndarray:
        r = self.entries[t - 1, :t]
        if np.isnan(r).any():
            raise ValueError(f"row {t} is incomplete")
        return r

    @property
    def completed(self) -> int:
        return int(sum(not np.isnan(self.entries[t, : t + 1]).any() for t in range(self.num_tasks)))

    def a(self, t: int, i: int) -> float:
        return float(self.entries[t - 1, i - 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage"] + [f"task_{i}" for i in range(1, self.num_tasks + 1)] + ["overall"])
        for t in range(1, self.completed + 1):
            cells = [fmt(v) for v in self.row(t)] + [""] * (self.num_tasks - t)
            o = fmt(self.overall[t - 1]) if t <= len(self.overall) else ""
            w.writerow([t] + cells + [o])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        n = len(rows[0]) - 2
        m = cls(n)
        for r in rows[1:]:
            t = int(r[0])
            o = float(r[-1]) if r[-1] else None
            m.record(t, [float(v) for v in r[1 : 1 + t]], o)
        return m


def fmt(x: float) -> str:
    """Six significant digits, locale-independent."""
    return format(float(x), ".6g")


def quantize(x: float) -> float:
    return float(fmt(x))


def _mean(values) -> float:
    # correctly rounded sum, so any summation order gives the same bits
    values = [float(v) for v in values]
    return math.fsum(values) / len(values)


def average_accuracy(m: AccuracyMatrix, t: int) -> float:
    return _mean(m.row(t))


def incremental_average(overall_accuracies) -> float:
    vals = np.asarray(overall_accuracies, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("need at least one stage")
    return _mean(vals)


def average_forgetting(m: AccuracyMatrix, t: int) -> float:
    if t < 2:
        raise ValueError("forgetting is undefined before the second stage")
    e = m.entries
    cur = m.row(t)[: t - 1]
    best = np.nanmax(e[: t - 1, : t - 1], axis=0)
    return _mean(best - cur)


def average_intransigence(m: AccuracyMatrix, reference, t: int) -> float:
    ref = np.asarray(reference, dtype=np.float64)
    if ref.size < t or np.isnan(ref[:t]).any():
        raise ValueError(f"reference accuracies missing for tasks up to {t}")
    diag = np.array([m.a(i, i) for i in range(1, t + 1)])
    if np.isnan(diag).any():
        raise ValueError("diagonal entry missing")
    return _mean(ref[:t] - diag)


def confusion_matrix(predictions, labels, class_count: int) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if p.size and (min(p.min(), y.min()) < 0 or max(p.max(), y.max()) >= class_count):
        raise ValueError("class index out of range")
    out = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(out, (y, p), 1)
    return out


def memory_report(class_count: int, feature_dim: int, exemplars_per_class: int = 20, image_shape=(3, 32, 32)) -> dict:
    """Stored-value counts for prototypes versus an exemplar memory."""
    if min(class_count, feature_dim, exemplars_per_class, *image_shape) < 0:
        raise ValueError("arguments must be nonnegative")
    c, h, w = image_shape
    return {
        "prototype_values": class_count * feature_dim,
        "exemplar_values": class_count * exemplars_per_class * c * h * w,
        "note": (
            "exemplar_values is the literal product classes*exemplars*C*H*W "
            "(100x20x32x32x3 gives 6,144,000, not 9.2M)"
        ),
    }

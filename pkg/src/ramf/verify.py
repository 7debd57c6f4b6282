"""Fast self-checks: gradients, augmentation group laws, label arithmetic, metrics.

Every check is looked up through module attributes at call time, so a patched
operation (for example a broken ``autodiff.relu``) is caught and reported under
its own name.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import augment as aug
from . import autodiff as ad
from . import metrics as mt
from . import model as md
from . import trainer as tr
from .autodiff import Tensor

GRAD_TOL = 1e-4
GRAD_SEEDS = tuple(range(5))
# the composed loss sits near 100: small steps drown in round-off and large ones cross ReLU
# kinks, so its check picks a step per coordinate from a ladder starting here
COMPOSED_EPS = 1e-4
COMPOSED_COORDS = 30


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# ---------------------------------------------------------------------------
# gradient checks; each returns the worst relative error over its inputs


def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _weighted_sum(out: Tensor, rng) -> Callable:
    # a fixed random projection makes every output coordinate matter
    w = Tensor(rng.normal(size=out.shape))
    return lambda t: ad.total(ad.mul(t, w))


def _op_check(op, *points, rng):
    """Worst error of ``sum(w * op(*points))`` with respect to each argument in turn."""
    probe = _weighted_sum(op(*[Tensor(p) for p in points]), rng)
    worst = 0.0
    for i in range(len(points)):

        def fn(x, i=i):
            args = [Tensor(p) for p in points]
            args[i] = x
            return probe(op(*args))

        worst = max(worst, ad.grad_check(fn, points[i]))
    return worst


def grad_elementwise(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    row = rng.normal(size=(4,))
    return max(
        _op_check(ad.add, a, row, rng=rng),
        _op_check(ad.mul, a, b, rng=rng),
        _op_check(lambda x: ad.scale(x, -1.7), a, rng=rng),
    )


def grad_matmul(rng):
    return _op_check(ad.matmul, rng.normal(size=(3, 5)), rng.normal(size=(5, 2)), rng=rng)


def grad_shape_ops(rng):
    a = rng.normal(size=(2, 3, 2, 2))
    return max(
        _op_check(ad.flatten, a, rng=rng),
        _op_check(lambda x: ad.reshape(x, (4, 6)), a, rng=rng),
        _op_check(ad.transpose, rng.normal(size=(3, 5)), rng=rng),
        _op_check(lambda x, y: ad.concat([x, y], axis=1), rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng=rng),
    )


def grad_reductions(rng):
    a = rng.normal(size=(4, 3))
    return max(
        ad.grad_check(lambda x: ad.total(ad.mul(x, x)), a),
        ad.grad_check(lambda x: ad.mean(ad.mul(x, x)), a),
    )


def grad_relu(rng):
    return _op_check(ad.relu, _away_from_zero(rng, (3, 7)), rng=rng)


def grad_linear(rng):
    x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=(3,))
    return max(_op_check(ad.linear, x, w, b, rng=rng), _op_check(ad.linear, x, w, rng=rng))


def grad_conv2d(rng):
    x, k = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3))
    return max(_op_check(lambda a, b, p=p: ad.conv2d(a, b, padding=p), x, k, rng=rng) for p in (0, 1))


def grad_avg_pool2d(rng):
    return _op_check(ad.avg_pool2d, rng.normal(size=(2, 3, 4, 6)), rng=rng)


def grad_row_norm(rng):
    return _op_check(ad.row_norm, _away_from_zero(rng, (4, 6)), rng=rng)


def grad_l2_normalize(rng):
    return _op_check(ad.l2_normalize, _away_from_zero(rng, (4, 6)), rng=rng)


def grad_cross_entropy(rng):
    targets = rng.integers(0, 5, size=6)
    return ad.grad_check(lambda z: ad.softmax_cross_entropy(z, targets), rng.normal(size=(6, 5)))


def grad_cosine_classifier(rng):
    clf = md.CosineClassifier(6, 5, rng, eta=float(rng.uniform(1, 10)), init_std=1.0)
    feats = _away_from_zero(rng, (4, 6))
    targets = rng.integers(0, 5, size=4)
    worst = ad.grad_check(lambda f: ad.softmax_cross_entropy(clf.logits(f), targets), feats)
    for attr in ("weight", "eta"):
        saved = getattr(clf, attr)

        def fn(x, attr=attr):
            setattr(clf, attr, x)
            return ad.softmax_cross_entropy(clf.logits(Tensor(feats)), targets)

        worst = max(worst, ad.grad_check(fn, saved.data))
        setattr(clf, attr, saved)
    return worst


def grad_mix_features(rng):
    prev = Tensor(rng.normal(size=(3, 4)))
    return _op_check(lambda f: md.mix_features(f, prev, 0.7, 0.3), rng.normal(size=(3, 4)), rng=rng)


def grad_kd(rng):
    prev = Tensor(rng.normal(size=(5, 4)))
    return ad.grad_check(lambda f: tr.loss_kd(f, prev), prev.data + _away_from_zero(rng, (5, 4)))


def grad_prototype_loss(rng):
    clf = md.CosineClassifier(6, 4, rng, init_std=1.0)
    store = md.PrototypeStore()
    for c in range(3):
        store.add(c, rng.normal(size=6) * 3, 10)
    heads = np.arange(3)
    draw_seed = int(rng.integers(2**32))

    def fn(w):
        clf.weight = w
        loss, _ = tr.loss_proto(clf, store, heads, np.random.default_rng(draw_seed), 0.5, 1.5)
        return loss

    return ad.grad_check(fn, clf.weight.data.copy())


def _tiny_stage(rng):
    """An 8px extractor/classifier pair mid-way through an incremental stage."""
    cfg = tr.MethodConfig()
    ext = md.FeatureExtractor(rng, image_size=8, dim=6)
    snapshot = ext.snapshot()
    for p in ext.parameters():  # move away from the snapshot so the KD distance is nonzero
        p.data = p.data + rng.normal(0, 0.05, size=p.shape)
    store = md.PrototypeStore()
    for c in (0, 1):
        store.add(c, rng.normal(size=6), 5)
    ls = aug.LabelSpace((0, 1), (2, 3), pairs=True, aux_kinds=(aug.AugKind.ROTATION,))
    clf = md.CosineClassifier(6, ls.size, rng, init_std=1.0)
    state = tr.TrainState(ext, clf, store, [0, 1], 1, 0, snapshot, ls)
    images = rng.random((3, 3, 8, 8))
    labels = np.array([2, 3, 2])
    batch = aug.compose_batch(images, labels, "incremental", ls, rng, rng)
    return cfg, state, batch, ls.class_heads([0, 1])


def grad_composed_loss(rng):
    """Total incremental loss (CE on mixed features + prototypes + KD) against every parameter group."""
    cfg, state, batch, old_heads = _tiny_stage(rng)
    draw_seed = int(rng.integers(2**32))
    slots = [(state.extractor.kernels, i) for i in range(3)]
    slots += [(state.extractor, "proj_w"), (state.extractor, "proj_b")]
    slots += [(state.classifier, "weight"), (state.classifier, "eta")]
    worst = 0.0
    for owner, key in slots:
        get = (lambda o=owner, k=key: o[k]) if isinstance(owner, list) else (lambda o=owner, k=key: getattr(o, k))
        saved = get()

        def put(v, o=owner, k=key):
            if isinstance(o, list):
                o[k] = v
            else:
                setattr(o, k, v)

        def fn(x, put=put):
            put(x)
            total, *_ = tr.incremental_losses(state, cfg, batch, state.snapshot, np.random.default_rng(draw_seed), old_heads)
            return total

        err = ad.grad_check(
            fn, saved.data.copy(), COMPOSED_EPS, COMPOSED_COORDS, int(rng.integers(2**32)), adaptive=True
        )
        worst = max(worst, err)
        put(saved)
    return worst


GRADIENT_CHECKS: dict[str, Callable] = {
    "add/mul/scale": grad_elementwise,
    "matmul": grad_matmul,
    "reshape/transpose/concat": grad_shape_ops,
    "total/mean": grad_reductions,
    "relu": grad_relu,
    "linear": grad_linear,
    "conv2d": grad_conv2d,
    "avg_pool2d": grad_avg_pool2d,
    "row_norm": grad_row_norm,
    "l2_normalize": grad_l2_normalize,
    "softmax_cross_entropy": grad_cross_entropy,
    "cosine_classifier": grad_cosine_classifier,
    "mix_features": grad_mix_features,
    "kd_loss": grad_kd,
    "prototype_loss": grad_prototype_loss,
    "composed_loss": grad_composed_loss,
}


def gradient_errors(seeds=GRAD_SEEDS) -> dict[str, float]:
    """Worst relative error per operation over the given seeds."""
    out = {}
    for name, check in GRADIENT_CHECKS.items():
        out[name] = max(check(np.random.default_rng([s, len(name)])) for s in seeds)
    return out


# ---------------------------------------------------------------------------
# augmentation, label-space and metric checks (boolean)


def group_laws(n: int = 200, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    failures = []
    for _ in range(n):
        s = int(rng.integers(2, 12))
        img = rng.random((3, s, s))
        if not np.array_equal(aug.rotate90(img, 4), img):
            failures.append("rotation: four quarter turns are not the identity")
        perm = aug.COLOR_PERMUTATIONS[int(rng.integers(5))]
        back = aug.permute_channels(aug.permute_channels(img, perm), aug.inverse_permutation(perm))
        if not np.array_equal(back, img):
            failures.append("colour permutation: inverse does not restore the image")
        top, left = (int(v) for v in rng.integers(-s // 2, s, size=2))
        h, w = (int(v) for v in rng.integers(1, s + 1, size=2))
        cut = aug.cutout(img, top, left, h, w)
        inside = np.zeros((s, s), dtype=bool)
        inside[max(top, 0) : max(top + h, 0), max(left, 0) : max(left + w, 0)] = True
        if (cut[:, inside] != 0).any() or not np.array_equal(cut[:, ~inside], img[:, ~inside]):
            failures.append("cutout: pixels outside the square changed or inside not zeroed")
        other = rng.random((3, s, s))
        lam = float(rng.uniform(0, 1))
        mixed = aug.mixup(img, other, lam)
        if (mixed < np.minimum(img, other)).any() or (mixed > np.maximum(img, other)).any():
            failures.append("mixup: result leaves the interval spanned by its inputs")
    return sorted(set(failures))


def label_arithmetic(k_max: int = 100) -> list[str]:
    failures = []
    for k in range(2, k_max + 1):
        ls = aug.LabelSpace((), tuple(range(k)))
        want = {"pairs": k * (k - 1) // 2, aug.AugKind.ROTATION: 3 * k, aug.AugKind.CUTOUT: k, aug.AugKind.COLOR_PERM: k}
        for kind, count in want.items():
            if ls.count(kind) != count:
                failures.append(f"K={k} {kind}: {ls.count(kind)} != {count}")
        if ls.size != k + sum(want.values()):
            failures.append(f"K={k}: total heads {ls.size}")
    if k_max >= 50 and aug.LabelSpace((), tuple(range(50))).size != 1525:
        failures.append("K=50 initial stage does not total 1525 heads")
    return failures


def naive_forgetting(e: np.ndarray, t: int) -> float:
    terms = []
    for i in range(t - 1):
        best = -math.inf
        for k in range(i, t - 1):
            if e[k, i] > best:
                best = e[k, i]
        terms.append(best - e[t - 1, i])
    return math.fsum(terms) / (t - 1)


def naive_average(e: np.ndarray, t: int) -> float:
    return math.fsum(e[t - 1, i] for i in range(t)) / t


def naive_intransigence(e: np.ndarray, ref, t: int) -> float:
    return math.fsum(ref[i] - e[i, i] for i in range(t)) / t


def random_matrix(rng, n: int) -> mt.AccuracyMatrix:
    rows = [rng.random(t) for t in range(1, n + 1)]
    return mt.AccuracyMatrix.from_rows(rows)


def metric_oracles(n: int = 200, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    failures = []
    for _ in range(n):
        size = int(rng.integers(2, 9))
        m = random_matrix(rng, size)
        ref = rng.random(size)
        e = m.entries
        for t in range(1, size + 1):
            if mt.average_accuracy(m, t) != naive_average(e, t):
                failures.append("average accuracy")
            if mt.average_intransigence(m, ref, t) != naive_intransigence(e, ref, t):
                failures.append("intransigence")
            if t > 1 and mt.average_forgetting(m, t) != naive_forgetting(e, t):
                failures.append("forgetting")
    return sorted(set(failures))


# ---------------------------------------------------------------------------


def run_all(seeds=GRAD_SEEDS) -> list[CheckResult]:
    results = []
    for name, check in GRADIENT_CHECKS.items():
        t0 = time.perf_counter()
        try:
            err = max(check(np.random.default_rng([s, len(name)])) for s in seeds)
            ok, detail = err < GRAD_TOL, f"max relative error {err:.2e}"
        except Exception as exc:  # a crashing op is a failing op
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(f"gradient {name}", ok, detail, time.perf_counter() - t0))
    for name, fn in (
        ("augmentation group laws", group_laws),
        ("label-space arithmetic", label_arithmetic),
        ("metric oracles", metric_oracles),
    ):
        t0 = time.perf_counter()
        try:
            failures = fn()
            ok, detail = not failures, "; ".join(failures) or "ok"
        except Exception as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ramf import metrics as mt
from ramf.metrics import (
    AccuracyMatrix,
    average_accuracy,
    average_forgetting,
    average_intransigence,
    confusion_matrix,
    incremental_average,
    memory_report,
)
from ramf.verify import naive_average, naive_forgetting, naive_intransigence, random_matrix

# published full-method stage accuracies, 11 stages, percent
ABLATION_ROW = [86.08, 83.09, 79.01, 76.58, 73.92, 71.89, 69.83, 67.77, 66.90, 65.75, 63.71]


def test_average_accuracy_examples():
    m = AccuracyMatrix.from_rows([[0.9], [0.8, 0.6]])
    assert average_accuracy(m, 2) == pytest.approx(0.70, abs=1e-15)
    assert average_accuracy(m, 1) == 0.9


def test_incomplete_row_rejected():
    m = AccuracyMatrix(3)
    m.record(1, [0.5])
    with pytest.raises(ValueError):
        average_accuracy(m, 2)


def test_incremental_average_table_row():
    assert abs(incremental_average(ABLATION_ROW) - 73.14) < 0.005


def test_incremental_average_trivial():
    assert incremental_average([0.42]) == 0.42
    assert incremental_average([0.3] * 7) == 0.3
    with pytest.raises(ValueError):
        incremental_average([])


def test_forgetting_examples():
    m = AccuracyMatrix.from_rows([[0.9], [0.7, 0.8]])
    assert average_forgetting(m, 2) == pytest.approx(0.20, abs=1e-15)
    with pytest.raises(ValueError):
        average_forgetting(m, 1)


def test_forgetting_uses_best_earlier_value():
    m = AccuracyMatrix.from_rows([[0.5], [0.9, 0.4], [0.6, 0.4, 0.8]])
    # task 1 peaked at 0.9, task 2 at 0.4
    assert average_forgetting(m, 3) == pytest.approx((0.3 + 0.0) / 2, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 8))
def test_non_decreasing_accuracies_give_non_positive_forgetting(seed, n):
    rng = np.random.default_rng(seed)
    base = rng.random(n) * 0.5
    rows = [base[:t] + 0.05 * t for t in range(1, n + 1)]
    m = AccuracyMatrix.from_rows(rows)
    for t in range(2, n + 1):
        assert average_forgetting(m, t) <= 0


def test_intransigence_examples():
    m = AccuracyMatrix.from_rows([[0.85], [0.5, 0.7]])
    assert average_intransigence(m, [0.9, 0.8], 2) == pytest.approx(0.075, abs=1e-15)
    assert average_intransigence(m, [0.85, 0.7], 2) == 0.0
    with pytest.raises(ValueError):
        average_intransigence(m, [0.9], 2)


def test_metrics_match_double_loop_oracles_on_1000_matrices():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        m = random_matrix(rng, n)
        ref = rng.random(n)
        e = m.entries
        for t in range(1, n + 1):
            assert average_accuracy(m, t) == naive_average(e, t)
            assert average_intransigence(m, ref, t) == naive_intransigence(e, ref, t)
            if t > 1:
                assert average_forgetting(m, t) == naive_forgetting(e, t)


def test_oracles_themselves_on_a_hand_example():
    e = np.array([[0.9, np.nan, np.nan], [0.7, 0.8, np.nan], [0.6, 0.5, 1.0]])
    assert naive_average(e, 3) == pytest.approx(0.7, abs=1e-15)
    assert naive_forgetting(e, 3) == pytest.approx((0.3 + 0.3) / 2, abs=1e-15)
    assert naive_intransigence(e, [1.0, 1.0, 1.0], 3) == pytest.approx((0.1 + 0.2 + 0.0) / 3, abs=1e-15)


def _relabelled(m: AccuracyMatrix, perm: np.ndarray) -> AccuracyMatrix:
    """Same per-task histories under new task labels: task i becomes perm[i].

    A lower-triangular matrix cannot hold a column in an earlier slot, so each
    old task's best earlier accuracy moves to row t-1 (zeros above it) and
    its last-row and diagonal values move with it.
    """
    t = m.num_tasks
    out = AccuracyMatrix(t)
    best = [np.nanmax(m.entries[: t - 1, i]) for i in range(t - 1)]
    for k in range(1, t + 1):
        row = np.zeros(k)
        for i in range(min(k, t - 1)):
            j = perm[i]
            if j >= k:
                continue
            if k == t:
                row[j] = m.entries[t - 1, i]
            elif k == t - 1:
                row[j] = best[i]
        if k == t:
            row[t - 1] = m.entries[t - 1, t - 1]
        out.record(k, row)
    return out


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_metrics_invariant_under_task_relabelling(seed):
    rng = np.random.default_rng(seed)
    t = int(rng.integers(3, 9))
    m = random_matrix(rng, t)
    perm = rng.permutation(t - 1)
    mp = _relabelled(m, perm)
    assert average_accuracy(mp, t) == average_accuracy(m, t)
    assert average_forgetting(mp, t) == average_forgetting(m, t)
    # intransigence pairs each reference with its own diagonal entry
    ref = rng.random(t)
    diag = np.array([m.a(i, i) for i in range(1, t + 1)])
    order = rng.permutation(t)
    md = AccuracyMatrix.from_rows([np.full(k, diag[order[k - 1]]) for k in range(1, t + 1)])
    assert average_intransigence(md, ref[order], t) == average_intransigence(m, ref, t)


def test_csv_round_trip_is_exact():
    rng = np.random.default_rng(0)
    m = random_matrix(rng, 6)
    for t in range(1, 7):
        m.overall.append(mt.quantize(rng.random()))
    back = AccuracyMatrix.from_csv(m.to_csv())
    np.testing.assert_array_equal(back.entries, m.entries)
    assert back.overall == m.overall
    assert back.to_csv() == m.to_csv()


def test_matrix_validation():
    m = AccuracyMatrix(2)
    with pytest.raises(ValueError):
        m.record(1, [1.2])
    with pytest.raises(ValueError):
        m.record(2, [0.5])
    with pytest.raises(ValueError):
        m.record(2, [0.5, 0.5], overall=0.5)  # stage 1 overall missing


def test_six_significant_digits():
    assert mt.fmt(0.123456789) == "0.123457"
    assert mt.fmt(1.0) == "1"
    assert mt.quantize(2 / 3) == 0.666667


def test_confusion_matrix():
    y = np.array([0, 0, 1, 2, 2, 2])
    c = confusion_matrix(y, y, 3)
    np.testing.assert_array_equal(c, np.diag([2, 1, 3]))
    p = np.array([1, 0, 1, 0, 2, 2])
    c = confusion_matrix(p, y, 3)
    assert c[0, 1] == 1 and c[2, 0] == 1
    np.testing.assert_array_equal(c.sum(axis=1), [2, 1, 3])
    assert c.sum() == 6
    with pytest.raises(ValueError):
        confusion_matrix([3], [0], 3)
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 3)


def test_memory_report():
    assert memory_report(100, 512)["prototype_values"] == 51_200
    assert memory_report(100, 512, 20, (3, 32, 32))["exemplar_values"] == 6_144_000
    assert memory_report(100, 512, 0)["exemplar_values"] == 0
    assert "9.2M" in memory_report(1, 1)["note"]
    with pytest.raises(ValueError):
        memory_report(-1, 512)


def test_conventions_are_documented():
    assert "max" in mt.FORGETTING_CONVENTION and "positive" in mt.FORGETTING_CONVENTION
    assert "expert" in mt.INTRANSIGENCE_REFERENCE
    assert math.isclose(sum(ABLATION_ROW) / 11, 73.139, abs_tol=1e-3)

"""Metrics against brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from _helpers import auc_oracle, class_f1_oracle
from ddi_ablation.metrics import (
    EmptyInput,
    SingleClassInput,
    accuracy,
    f1_binary,
    f1_macro,
    f1_weighted,
    per_class_f1,
    roc_auc,
)


def test_auc_perfect_and_inverted():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0


def test_auc_all_tied_is_half():
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_single_class_raises():
    with pytest.raises(SingleClassInput):
        roc_auc([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("fn", [accuracy, f1_binary, f1_macro, f1_weighted])
def test_empty_input_raises(fn):
    with pytest.raises(EmptyInput):
        fn([], [])


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=50))
def test_auc_matches_pair_counting(rows):
    scores = [s / 6 for s, _ in rows]      # coarse grid forces ties
    labels = [y for _, y in rows]
    if len(set(labels)) < 2:
        return
    assert abs(roc_auc(scores, labels) - auc_oracle(scores, labels)) <= 1e-12


def test_f1_macro_examples():
    assert f1_macro([0, 1, 2, 2], [0, 1, 2, 2]) == 1.0
    assert f1_macro([1, 0, 1, 0], [0, 1, 0, 1]) == 0.0
    assert accuracy([3, 3, 3], [3, 3, 3]) == 1.0


def test_f1_macro_ignores_absent_classes():
    # classes 0 and 1 only; the other 84 never appear and do not dilute the mean
    pred, true = [0, 0, 1, 1], [0, 1, 1, 1]
    expected = np.mean([2 / 3, 0.8])
    assert f1_macro(pred, true) == pytest.approx(expected, abs=1e-15)


def test_per_class_rejects_out_of_range():
    with pytest.raises(ValueError):
        per_class_f1([0, 86], [0, 1])
    with pytest.raises(ValueError):
        per_class_f1([0, -1], [0, 1])


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=50))
def test_multiclass_matches_confusion_oracle(rows):
    pred = [p for p, _ in rows]
    true = [t for _, t in rows]
    oracle = class_f1_oracle(pred, true)
    macro = sum(f for f, _ in oracle.values()) / len(oracle)
    weighted = sum(f * s for f, s in oracle.values()) / len(true)
    assert abs(f1_macro(pred, true) - macro) <= 1e-12
    assert abs(f1_weighted(pred, true) - weighted) <= 1e-12
    assert accuracy(pred, true) == sum(p == t for p, t in rows) / len(rows)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_binary_f1_counts(rows):
    pred = np.array([p for p, _ in rows])
    true = np.array([t for _, t in rows])
    tp = int(np.sum(pred & true))
    denom = 2 * tp + int(np.sum(pred & (1 - true))) + int(np.sum((1 - pred) & true))
    assert f1_binary(pred, true) == (2 * tp / denom if denom else 0.0)


def test_metrics_bounded(rng):
    for _ in range(50):
        n = rng.integers(2, 50)
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        s = rng.random(n)
        assert 0.0 <= roc_auc(s, labels) <= 1.0
        p, t = rng.integers(0, 86, n), rng.integers(0, 86, n)
        for v in (f1_macro(p, t), f1_weighted(p, t), accuracy(p, t)):
            assert 0.0 <= v <= 1.0

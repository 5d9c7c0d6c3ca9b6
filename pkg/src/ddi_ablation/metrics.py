"""Binary and multi-class evaluation metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class SingleClassInput(ValueError):
    pass


class EmptyInput(ValueError):
    pass


def _nonempty(*arrays):
    out = [np.asarray(a) for a in arrays]
    if any(a.size == 0 for a in out):
        raise EmptyInput("metric needs at least one sample")
    if len({a.shape for a in out}) != 1:
        raise ValueError(f"shape mismatch {[a.shape for a in out]}")
    return out


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for tied scores."""
    scores, labels = _nonempty(scores, labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("AUC needs both classes")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(pred, true) -> float:
    pred, true = _nonempty(pred, true)
    return float(np.mean(pred == true))


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_binary(pred, true) -> float:
    pred, true = _nonempty(pred, true)
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    return _f1(tp, fp, fn)


def per_class_f1(pred, true, n_classes: int = 86):
    """(classes, f1, support) over classes present in truth or predictions."""
    pred, true = _nonempty(pred, true)
    if pred.min() < 0 or true.min() < 0 or pred.max() >= n_classes or true.max() >= n_classes:
        raise ValueError(f"class labels must lie in 0..{n_classes - 1}")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    classes = np.flatnonzero(conf.sum(axis=0) + conf.sum(axis=1))
    f1 = np.array([_f1(tp[c], fp[c], fn[c]) for c in classes])
    support = conf.sum(axis=1)[classes]
    return classes, f1, support


def f1_macro(pred, true, n_classes: int = 86) -> float:
    """Unweighted mean F1 over classes seen in truth or predictions."""
    _, f1, _ = per_class_f1(pred, true, n_classes)
    return float(f1.mean())


def f1_weighted(pred, true, n_classes: int = 86) -> float:
    _, f1, support = per_class_f1(pred, true, n_classes)
    return float((f1 * support).sum() / support.sum())

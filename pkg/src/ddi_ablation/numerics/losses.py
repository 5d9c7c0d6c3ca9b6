"""Classification losses with hand-written backward rules."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeMismatch, Tensor, _emit

MASK_LABEL = -1


class LabelOutOfRange(ValueError):
    pass


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits (log-sum-exp stabilized)."""
    z = logits.value
    y = np.asarray(labels)
    if z.shape != y.shape:
        raise ShapeMismatch("bce_with_logits", z.shape, y.shape)
    if y.size and not np.all((y == 0) | (y == 1)):
        raise LabelOutOfRange("binary labels must be 0 or 1")
    y = y.astype(z.dtype)
    n = max(z.size, 1)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = 0.5 * (1 + np.tanh(0.5 * z))
    return _emit(np.asarray(per.sum() / n, dtype=z.dtype), (logits,),
                 lambda g: ((g * (sig - y) / n).astype(z.dtype),))


def masked_cross_entropy(logits: Tensor, labels, n_classes: int | None = None) -> Tensor:
    """Mean softmax cross-entropy over rows whose label is not -1.

    A batch with every row masked yields loss 0 and zero gradients.
    """
    z = logits.value
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeMismatch("masked_cross_entropy", z.shape, y.shape)
    c = z.shape[1] if n_classes is None else n_classes
    if y.size and (y.min() < MASK_LABEL or y.max() >= c):
        raise LabelOutOfRange(f"class labels must lie in -1..{c - 1}")
    valid = np.flatnonzero(y != MASK_LABEL)
    m = len(valid)
    if m == 0:
        return _emit(np.asarray(0.0, dtype=z.dtype), (logits,), lambda g: (np.zeros_like(z),))
    zv = z[valid]
    yv = y[valid]
    shift = zv - zv.max(axis=1, keepdims=True)
    e = np.exp(shift)
    s = e.sum(axis=1, keepdims=True)
    per = np.log(s[:, 0]) - shift[np.arange(m), yv]
    probs = e / s

    def back(g):
        out = np.zeros_like(z)
        d = probs.copy()
        d[np.arange(m), yv] -= 1
        out[valid] = g * d / m
        return (out,)

    return _emit(np.asarray(per.sum() / m, dtype=z.dtype), (logits,), back)

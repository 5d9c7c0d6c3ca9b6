"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded whenever at
least one input requires a gradient; outside a tape they run as plain numpy.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

_local = threading.local()


class ShapeMismatch(ValueError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class NotScalarLoss(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value), requires_grad=True, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Used as a context manager; tapes nest per thread and the innermost one
    records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def backward(tape: Tape, loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every leaf reachable on ``tape``.

    Leaves listed in ``leaves`` that do not influence the loss get zero
    gradients.  Each leaf's ``.grad`` is set as a side effect.
    """
    if loss.value.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(node.out) for node in tape.nodes}
    if loss.requires_grad and id(loss) not in produced:
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    owners: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                if key not in produced:
                    owners[key] = t
    result = {owners[k]: g for k, g in grads.items() if k in owners}
    if leaves is not None:
        for leaf in leaves:
            if leaf not in result:
                result[leaf] = np.zeros_like(leaf.value)
    for leaf, g in result.items():
        leaf.grad = g
    return result


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


def segment_sum_array(x: np.ndarray, segments: np.ndarray, n_segments: int) -> np.ndarray:
    """Row sums grouped by ``segments`` (sparse indicator matmul, fixed order)."""
    flat = x.reshape(len(x), int(np.prod(x.shape[1:])))
    ind = sparse.csr_matrix((np.ones(len(segments), dtype=x.dtype), (segments, np.arange(len(segments)))),
                            shape=(n_segments, len(segments)))
    return np.asarray(ind @ flat).astype(x.dtype, copy=False).reshape((n_segments,) + x.shape[1:])


# --------------------------------------------------------------------------
# elementwise and linear algebra
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeMismatch("transpose", a.shape)
    return _emit(a.value.T, (a,), lambda g: (g.T,))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    # np.maximum propagates NaN so non-finite activations reach the loss check
    return _emit(np.maximum(x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), (x,), back)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stabilized softmax; entries where ``mask`` is False get exactly zero."""
    v = x.value
    if mask is not None:
        if mask.shape != v.shape:
            raise ShapeMismatch("softmax mask", v.shape, mask.shape)
        shifted = np.where(mask, v, -np.inf)
        m = shifted.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0)
        e = np.where(mask, np.exp(np.where(mask, v - m, 0)), 0)
    else:
        e = np.exp(v - v.max(axis=axis, keepdims=True))
    s = e.sum(axis=axis, keepdims=True)
    y = (e / np.where(s > 0, s, 1)).astype(v.dtype)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(value, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, start:stop] = g
        return (out,)

    return _emit(x.value[:, start:stop], (x,), back)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate in the backward pass."""
    n = x.shape[0]
    return _emit(x.value[index], (x,), lambda g: (segment_sum_array(g, index, n),))


def segment_mean(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Mean of rows of ``x`` grouped by ``segments``; empty segments give zeros."""
    if len(segments) != x.shape[0]:
        raise ShapeMismatch("segment_mean", x.shape, segments.shape)
    counts = np.bincount(segments, minlength=n_segments).astype(x.dtype)
    denom = np.maximum(counts, 1)[:, None]
    value = segment_sum_array(x.value, segments, n_segments) / denom
    return _emit(value.astype(x.dtype), (x,), lambda g: ((g / denom)[segments],))


def row_normalize(x: Tensor) -> Tensor:
    """Unit-norm rows; all-zero rows stay zero."""
    v = x.value
    norm = np.sqrt((v * v).sum(axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1)
    y = np.where(norm > 0, v / safe, 0).astype(v.dtype)

    def back(g):
        return (np.where(norm > 0, (g - y * (g * y).sum(axis=1, keepdims=True)) / safe, 0),)

    return _emit(y, (x,), back)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class BatchNormStats:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, n: int, dtype=np.float32):
        self.mean = np.zeros(n, dtype=dtype)
        self.var = np.ones(n, dtype=dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, train: bool,
               momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    v = x.value
    if v.ndim != 2 or gamma.shape != (v.shape[1],) or beta.shape != (v.shape[1],):
        raise ShapeMismatch("batch_norm", v.shape, gamma.shape, beta.shape)
    if train:
        n = v.shape[0]
        mu = v.mean(axis=0)
        var = v.var(axis=0)
        if update_stats:
            unbiased = var * n / (n - 1) if n > 1 else var
            stats.mean[...] = (1 - momentum) * stats.mean + momentum * mu
            stats.var[...] = (1 - momentum) * stats.var + momentum * unbiased
    else:
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((v - mu) * inv).astype(v.dtype)
    gv = gamma.value
    y = xhat * gv + beta.value

    def back(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        gx = g * gv
        if train:
            dx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
        else:
            dx = gx * inv
        return dx.astype(v.dtype), dgamma, dbeta

    return _emit(y.astype(v.dtype), (x, gamma, beta), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    v = x.value
    if gamma.shape != (v.shape[-1],) or beta.shape != (v.shape[-1],):
        raise ShapeMismatch("layer_norm", v.shape, gamma.shape, beta.shape)
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    gv = gamma.value

    def back(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(v.ndim - 1))
        return dx.astype(v.dtype), (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit((xhat * gv + beta.value).astype(v.dtype), (x, gamma, beta), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; ``rng=None`` (eval mode) is the identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return _emit(x.value * keep, (x,), lambda g: (g * keep,))


def edge_message(h: Tensor, weight: Tensor, bias: Tensor, edge_attr: np.ndarray,
                 src: np.ndarray) -> Tensor:
    """Edge-conditioned messages ``h[src] @ Theta(e)`` for every arc.

    ``Theta(e) = reshape(e @ weight + bias, (d_in, d_out))`` with ``weight`` of
    shape (d_edge, d_in * d_out).  Computed per node first and gathered, so
    the per-arc (d_in x d_out) matrices are never materialized.
    """
    n, d_in = h.shape
    d_edge = edge_attr.shape[1]
    if weight.shape[0] != d_edge or weight.shape[1] % d_in or bias.shape != (weight.shape[1],):
        raise ShapeMismatch("edge_message", h.shape, weight.shape, bias.shape, edge_attr.shape)
    d_out = weight.shape[1] // d_in
    k = d_edge + 1
    # (k, d_in, d_out) -> (d_in, k * d_out)
    w_full = np.concatenate([weight.value, bias.value[None]], axis=0).reshape(k, d_in, d_out)
    w_flat = w_full.transpose(1, 0, 2).reshape(d_in, k * d_out)
    e_aug = np.concatenate([edge_attr, np.ones((len(edge_attr), 1), dtype=edge_attr.dtype)], axis=1)
    e_aug = e_aug.astype(h.dtype)
    per_node = (h.value @ w_flat).reshape(n, k, d_out)
    value = np.einsum("ek,ekc->ec", e_aug, per_node[src])

    def back(g):
        g_arc = (e_aug[:, :, None] * g[:, None, :]).reshape(len(src), k * d_out)
        gh = segment_sum_array(g_arc @ w_flat.T, src, n)
        gw = (h.value[src].T @ g_arc).reshape(d_in, k, d_out).transpose(1, 0, 2).reshape(k, d_in * d_out)
        return gh, gw[:-1], gw[-1]

    return _emit(value.astype(h.dtype), (h, weight, bias), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", old, shape) from None
    return _emit(value, (x,), lambda g: (g.reshape(old),))


def pad_segments(x: Tensor, segments: np.ndarray, positions: np.ndarray, n_segments: int,
                 length: int) -> Tensor:
    """Scatter rows into a zero-padded (n_segments, length, d) block tensor."""
    out = np.zeros((n_segments, length) + x.shape[1:], dtype=x.dtype)
    out[segments, positions] = x.value
    return _emit(out, (x,), lambda g: (g[segments, positions],))


def unpad_segments(x: Tensor, segments: np.ndarray, positions: np.ndarray) -> Tensor:
    """Inverse of :func:`pad_segments`: rows ``x[segments, positions]``."""
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[segments, positions] = g
        return (out,)

    return _emit(x.value[segments, positions], (x,), back)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul of (B, n, k) and (B, k, m)."""
    if a.value.ndim != 3 or b.value.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeMismatch("bmm", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.swapaxes(1, 2), av.swapaxes(1, 2) @ g))


def swap_last(a: Tensor) -> Tensor:
    return _emit(a.value.swapaxes(-1, -2), (a,), lambda g: (g.swapaxes(-1, -2),))

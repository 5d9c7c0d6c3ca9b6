"""Siamese NNConv encoder and the Concat / CrossAtt / Ternary combiners.

Every variant shares the encoder (three edge-conditioned convolutions with
batch norm, ReLU and dropout) and the two MLP heads.  They differ in what
happens between encoding and pooling:

* ``concat``   - nothing; pooled molecule vectors are concatenated.
* ``crossatt`` - multi-head cross-attention in both directions, each with a
  residual connection and layer norm.
* ``ternary``  - cross-attention, then one convolution over the union of both
  molecules plus top-k cosine-similarity edges between them.

Weights are stored as (in, out) matrices so ``x @ W + b`` is a linear layer.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .chemgraph import ATOM_DIM, BOND_DIM, CachedGraph
from .numerics import BatchNormStats, DropoutStream, Tensor

CONCAT, CROSSATT, TERNARY = "concat", "crossatt", "ternary"
VARIANTS = (CONCAT, CROSSATT, TERNARY)

# dropout layer ids; encoder layers use their own index 0..n-1
_BINARY_HEAD_LAYER = 10
_MULTI_HEAD_LAYER = 11


class UnknownVariant(ValueError):
    pass


class VariantHasNoAttention(ValueError):
    pass


class EmptyGraph(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = CROSSATT
    hidden_dim: int = 64
    n_mp_layers: int = 3
    n_heads: int = 4
    dropout_p: float = 0.2
    n_classes: int = 86
    atom_dim: int = ATOM_DIM
    bond_dim: int = BOND_DIM
    topk: int = 3
    head_hidden: int = 256
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UnknownVariant(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.topk < 1:
            raise ValueError("topk must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

@dataclass
class GraphBatch:
    """Disjoint union of molecular graphs."""

    x: np.ndarray
    edge_attr: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    graph_index: np.ndarray
    n_graphs: int

    @property
    def n_atoms(self) -> int:
        return self.x.shape[0]


def batch_graphs(graphs: Sequence[CachedGraph], dtype=np.float32) -> GraphBatch:
    xs, es, srcs, dsts, gidx = [], [], [], [], []
    offset = 0
    for k, g in enumerate(graphs):
        n = g.atom_features.shape[0]
        if n == 0:
            raise EmptyGraph("molecule without atoms")
        xs.append(g.atom_features)
        es.append(g.bond_features)
        srcs.append(g.src + offset)
        dsts.append(g.dst + offset)
        gidx.append(np.full(n, k, dtype=np.int64))
        offset += n
    bond_dim = graphs[0].bond_features.shape[1] if graphs else BOND_DIM
    return GraphBatch(
        x=np.concatenate(xs).astype(dtype),
        edge_attr=np.concatenate(es).astype(dtype) if es else np.zeros((0, bond_dim), dtype),
        src=np.concatenate(srcs),
        dst=np.concatenate(dsts),
        graph_index=np.concatenate(gidx),
        n_graphs=len(graphs),
    )


@dataclass
class PairBatch:
    """Molecules A_0..A_{B-1} followed by B_0..B_{B-1} as one graph batch."""

    graphs: GraphBatch
    n_pairs: int
    n_atoms_a: int

    @property
    def pair_of_atom(self) -> np.ndarray:
        return self.graphs.graph_index % self.n_pairs


def collate(pairs: Sequence[tuple[CachedGraph, CachedGraph]], dtype=np.float32) -> PairBatch:
    a_side = [a for a, _ in pairs]
    b_side = [b for _, b in pairs]
    gb = batch_graphs(a_side + b_side, dtype)
    n_a = int(np.sum([g.atom_features.shape[0] for g in a_side]))
    return PairBatch(gb, len(pairs), n_a)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def _component(path: str) -> str:
    return path.split(".", 1)[0]


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict[str, Tensor]
    bn: dict[str, BatchNormStats] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def group(self, *components: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if _component(k) in components}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, s in self.bn.items():
            out[f"{name}.running_mean"] = s.mean
            out[f"{name}.running_var"] = s.var
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for name, s in self.bn.items():
            s.mean[...] = buffers[f"{name}.running_mean"]
            s.var[...] = buffers[f"{name}.running_var"]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def copy(self) -> "ModelParams":
        params = {k: nx.parameter(v.value.copy(), name=k) for k, v in self.params.items()}
        bn = {}
        for k, s in self.bn.items():
            c = BatchNormStats(len(s.mean), s.mean.dtype)
            c.mean[...] = s.mean
            c.var[...] = s.var
            bn[k] = c
        return ModelParams(self.config, params, bn)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor of ``config.variant`` with its shape, in init order."""
    h, e = config.hidden_dim, config.bond_dim
    shapes: dict[str, tuple[int, ...]] = {}
    d_in = config.atom_dim
    for layer in range(config.n_mp_layers):
        p = f"encoder.conv{layer}"
        shapes[f"{p}.edge.weight"] = (e, d_in * h)
        shapes[f"{p}.edge.bias"] = (d_in * h,)
        shapes[f"{p}.root.weight"] = (d_in, h)
        shapes[f"{p}.root.bias"] = (h,)
        shapes[f"{p}.bn.weight"] = (h,)
        shapes[f"{p}.bn.bias"] = (h,)
        d_in = h
    if config.variant in (CROSSATT, TERNARY):
        for direction in ("ab", "ba"):
            for m in ("q", "k", "v", "o"):
                shapes[f"attention.{direction}.{m}.weight"] = (h, h)
                shapes[f"attention.{direction}.{m}.bias"] = (h,)
            shapes[f"attention.{direction}.norm.weight"] = (h,)
            shapes[f"attention.{direction}.norm.bias"] = (h,)
    if config.variant == TERNARY:
        for m in ("self", "nbr"):
            shapes[f"interaction.{m}.weight"] = (h, h)
            shapes[f"interaction.{m}.bias"] = (h,)
        shapes["interaction.bn.weight"] = (h,)
        shapes["interaction.bn.bias"] = (h,)
    hh = config.head_hidden
    for head, n_out in (("binary", 1), ("multi", config.n_classes)):
        shapes[f"heads.{head}.fc1.weight"] = (2 * h, hh)
        shapes[f"heads.{head}.fc1.bias"] = (hh,)
        shapes[f"heads.{head}.fc2.weight"] = (hh, n_out)
        shapes[f"heads.{head}.fc2.bias"] = (n_out,)
    return shapes


def _fan_in(path: str, shapes: dict[str, tuple[int, ...]]) -> int:
    stem = path.rsplit(".", 1)[0]
    return shapes[f"{stem}.weight"][0]


def init_params(config: ModelConfig, seed: int = 42, dtype=np.float32) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) init for linear maps, (1, 0) for norm layers.

    Each tensor draws from its own Philox stream keyed by (seed, path), so
    shared components start identical across variants.
    """
    shapes = param_shapes(config)
    params = {}
    for path, shape in shapes.items():
        if ".bn." in path or ".norm." in path:
            value = np.ones(shape) if path.endswith("weight") else np.zeros(shape)
        else:
            key = np.random.SeedSequence([seed, zlib.crc32(path.encode())]).generate_state(2, np.uint64)
            rng = np.random.Generator(np.random.Philox(key=key))
            bound = 1.0 / math.sqrt(_fan_in(path, shapes))
            value = rng.uniform(-bound, bound, size=shape)
        params[path] = nx.parameter(value.astype(dtype), name=path)
    bn = {f"encoder.conv{layer}.bn": BatchNormStats(config.hidden_dim, dtype)
          for layer in range(config.n_mp_layers)}
    if config.variant == TERNARY:
        bn["interaction.bn"] = BatchNormStats(config.hidden_dim, dtype)
    return ModelParams(config, params, bn)


def count_params(model: ModelParams) -> dict:
    """Exact learnable-parameter count with a per-component breakdown.

    The encoder appears once although it encodes both molecules.
    """
    breakdown = {"encoder": 0, "attention": 0, "interaction": 0, "heads": 0}
    for path, t in model.params.items():
        breakdown[_component(path)] += int(t.value.size)
    return {"total": sum(breakdown.values()), "breakdown": breakdown}


# --------------------------------------------------------------------------
# forward pieces
# --------------------------------------------------------------------------

def _rng(stream: DropoutStream | None, layer: int):
    return stream.layer(layer) if stream is not None else None


def encode(batch: GraphBatch, model: ModelParams, train: bool = False,
           stream: DropoutStream | None = None) -> Tensor:
    """Atom embeddings (n_atoms x hidden) after all message-passing layers.

    Per layer: ``h' = Dropout(ReLU(BN(h W_root + b + mean_j h_j Theta(e_ji))))``;
    atoms without neighbours receive only the root term.
    """
    cfg, p = model.config, model.params
    h = Tensor(batch.x)
    if batch.x.shape[1] != cfg.atom_dim or batch.edge_attr.shape[1] != cfg.bond_dim:
        raise nx.ShapeMismatch("encode", batch.x.shape, batch.edge_attr.shape)
    for layer in range(cfg.n_mp_layers):
        pre = f"encoder.conv{layer}"
        root = nx.linear(h, p[f"{pre}.root.weight"], p[f"{pre}.root.bias"])
        msg = nx.edge_message(h, p[f"{pre}.edge.weight"], p[f"{pre}.edge.bias"], batch.edge_attr, batch.src)
        agg = nx.segment_mean(msg, batch.dst, batch.n_atoms)
        z = nx.batch_norm(nx.add(root, agg), p[f"{pre}.bn.weight"], p[f"{pre}.bn.bias"],
                          model.bn[f"{pre}.bn"], train, cfg.bn_momentum, cfg.bn_eps)
        h = nx.dropout(nx.relu(z), cfg.dropout_p, _rng(stream, layer) if train else None)
    return h


def pool(atom_embeddings: Tensor, graph_index: np.ndarray | None = None, n_graphs: int = 1) -> Tensor:
    """Global mean pooling; one row per graph."""
    if atom_embeddings.shape[0] == 0:
        raise EmptyGraph("cannot pool an empty graph")
    if graph_index is None:
        graph_index = np.zeros(atom_embeddings.shape[0], dtype=np.int64)
    return nx.segment_mean(atom_embeddings, graph_index, n_graphs)


@dataclass(frozen=True)
class Segments:
    """Row -> (pair, position) layout of contiguous per-pair row blocks."""

    index: np.ndarray
    position: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_index(cls, index: np.ndarray, n_segments: int) -> "Segments":
        counts = np.bincount(index, minlength=n_segments)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        return cls(index, np.arange(len(index)) - starts[index], counts)

    @property
    def n(self) -> int:
        return len(self.counts)

    @property
    def length(self) -> int:
        return int(self.counts.max()) if len(self.counts) else 0


def _attend(hq: Tensor, hkv: Tensor, model: ModelParams, direction: str, sq: Segments, skv: Segments):
    cfg, p = model.config, model.params
    pre = f"attention.{direction}"
    q = nx.linear(hq, p[f"{pre}.q.weight"], p[f"{pre}.q.bias"])
    k = nx.linear(hkv, p[f"{pre}.k.weight"], p[f"{pre}.k.bias"])
    v = nx.linear(hkv, p[f"{pre}.v.weight"], p[f"{pre}.v.bias"])
    d = cfg.head_dim
    scale = 1.0 / math.sqrt(d)
    mask = (np.arange(sq.length)[None, :, None] < sq.counts[:, None, None]) & \
           (np.arange(skv.length)[None, None, :] < skv.counts[:, None, None])
    outs, maps = [], []
    for head in range(cfg.n_heads):
        cols = (head * d, (head + 1) * d)
        qh = nx.pad_segments(nx.slice_cols(q, *cols), sq.index, sq.position, sq.n, sq.length)
        kh = nx.pad_segments(nx.slice_cols(k, *cols), skv.index, skv.position, skv.n, skv.length)
        vh = nx.pad_segments(nx.slice_cols(v, *cols), skv.index, skv.position, skv.n, skv.length)
        scores = nx.mul(nx.bmm(qh, nx.swap_last(kh)), scale)
        attn = nx.softmax(scores, axis=2, mask=mask)
        maps.append(attn.value)
        outs.append(nx.unpad_segments(nx.bmm(attn, vh), sq.index, sq.position))
    o = nx.linear(nx.concat(outs, axis=1), p[f"{pre}.o.weight"], p[f"{pre}.o.bias"])
    out = nx.layer_norm(nx.add(hq, o), p[f"{pre}.norm.weight"], p[f"{pre}.norm.bias"])
    return out, np.stack(maps)


def cross_attention(h_a: Tensor, h_b: Tensor, model: ModelParams, seg_a: Segments | None = None,
                    seg_b: Segments | None = None):
    """Bidirectional multi-head cross-attention between paired molecules.

    Rows of ``h_a``/``h_b`` are grouped into pairs by ``seg_a``/``seg_b``
    (default: a single pair).  Each A-atom attends over the B-atoms of its own
    pair and vice versa; per direction
    ``h' = LayerNorm(h + concat_heads(softmax(Q K^T / sqrt(d)) V) W_o + b_o)``.
    Returns ``(h_a', h_b', attn_ab, attn_ba)``; attention maps have shape
    (heads, pairs, max_query_atoms, max_key_atoms) with zero padding.
    """
    if h_a.shape[0] < 1 or h_b.shape[0] < 1:
        raise EmptyGraph("cross-attention needs at least one atom per side")
    if h_a.shape[1] != h_b.shape[1]:
        raise nx.ShapeMismatch("cross_attention", h_a.shape, h_b.shape)
    if seg_a is None:
        seg_a = Segments.from_index(np.zeros(h_a.shape[0], dtype=np.int64), 1)
    if seg_b is None:
        seg_b = Segments.from_index(np.zeros(h_b.shape[0], dtype=np.int64), 1)
    new_a, attn_ab = _attend(h_a, h_b, model, "ab", seg_a, seg_b)
    new_b, attn_ba = _attend(h_b, h_a, model, "ba", seg_b, seg_a)
    return new_a, new_b, attn_ab, attn_ba


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; rows with zero norm score 0 against everything."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    an = np.where(na > 0, a / np.where(na > 0, na, 1), 0)
    bn = np.where(nb > 0, b / np.where(nb > 0, nb, 1), 0)
    return an @ bn.T


TIE_DECIMALS = 12


@dataclass(frozen=True)
class InteractionGraph:
    edges: np.ndarray       # (k, 2) local indices (atom in A, atom in B), sorted
    similarity: np.ndarray  # (k,) cosine similarity per edge


def build_interaction_graph(h_a: np.ndarray, h_b: np.ndarray, topk: int = 3) -> InteractionGraph:
    """Top-k cosine partners for every atom, in both directions, merged.

    Similarities are ranked after rounding to ``TIE_DECIMALS`` places, so
    values equal up to floating-point noise count as ties; ties go to the
    lower partner index.
    """
    h_a, h_b = np.asarray(h_a), np.asarray(h_b)
    sim = cosine_matrix(h_a, h_b)
    key = np.round(sim.astype(np.float64), TIE_DECIMALS)
    n_a, n_b = sim.shape
    pairs = set()
    best_b = np.argsort(-key, axis=1, kind="stable")[:, :min(topk, n_b)]
    for i, js in enumerate(best_b):
        pairs.update((i, int(j)) for j in js)
    best_a = np.argsort(-key.T, axis=1, kind="stable")[:, :min(topk, n_a)]
    for j, is_ in enumerate(best_a):
        pairs.update((int(i), j) for i in is_)
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    return InteractionGraph(edges, sim[edges[:, 0], edges[:, 1]])


def _batch_interaction_edges(h_a: np.ndarray, h_b: np.ndarray, batch: PairBatch, topk: int) -> np.ndarray:
    """Interaction edges for every pair, as global (a_row, b_row) indices."""
    pa = batch.pair_of_atom[:batch.n_atoms_a]
    pb = batch.pair_of_atom[batch.n_atoms_a:]
    a_start = np.searchsorted(pa, np.arange(batch.n_pairs))
    a_stop = np.searchsorted(pa, np.arange(batch.n_pairs), side="right")
    b_start = np.searchsorted(pb, np.arange(batch.n_pairs))
    b_stop = np.searchsorted(pb, np.arange(batch.n_pairs), side="right")
    out = []
    for k in range(batch.n_pairs):
        g = build_interaction_graph(h_a[a_start[k]:a_stop[k]], h_b[b_start[k]:b_stop[k]], topk)
        out.append(g.edges + np.array([a_start[k], b_start[k]]))
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)


def interaction_conv(h: Tensor, batch: PairBatch, inter_edges: np.ndarray, model: ModelParams,
                     train: bool) -> Tensor:
    """One convolution over bonds plus interaction edges.

    ``h' = ReLU(BN(h W_self + b + mean_j gate_ij (h_j W_nbr + b)))``; bonds use
    gate 1, interaction edges the cosine similarity of their endpoints.
    """
    cfg, p = model.config, model.params
    g = batch.graphs
    a_idx = inter_edges[:, 0]
    b_idx = inter_edges[:, 1] + batch.n_atoms_a
    unit = nx.row_normalize(h)
    gate = nx.reduce_sum(nx.mul(nx.gather(unit, a_idx), nx.gather(unit, b_idx)), axis=1, keepdims=True)
    ones = Tensor(np.ones((len(g.src), 1), dtype=h.dtype))
    gates = nx.concat([ones, gate, gate], axis=0)
    src = np.concatenate([g.src, a_idx, b_idx])
    dst = np.concatenate([g.dst, b_idx, a_idx])
    nbr = nx.linear(h, p["interaction.nbr.weight"], p["interaction.nbr.bias"])
    msg = nx.mul(nx.gather(nbr, src), gates)
    agg = nx.segment_mean(msg, dst, g.n_atoms)
    z = nx.add(nx.linear(h, p["interaction.self.weight"], p["interaction.self.bias"]), agg)
    z = nx.batch_norm(z, p["interaction.bn.weight"], p["interaction.bn.bias"], model.bn["interaction.bn"],
                      train, cfg.bn_momentum, cfg.bn_eps)
    return nx.relu(z)


def _head(z: Tensor, model: ModelParams, name: str, layer: int, train: bool, stream) -> Tensor:
    p = model.params
    pre = f"heads.{name}"
    hidden = nx.relu(nx.linear(z, p[f"{pre}.fc1.weight"], p[f"{pre}.fc1.bias"]))
    hidden = nx.dropout(hidden, model.config.dropout_p, _rng(stream, layer) if train else None)
    return nx.linear(hidden, p[f"{pre}.fc2.weight"], p[f"{pre}.fc2.bias"])


@dataclass
class ForwardResult:
    binary_logit: Tensor           # (pairs,)
    class_logits: Tensor           # (pairs, n_classes)
    attn_ab: np.ndarray | None     # (heads, pairs, max atoms A, max atoms B), zero padded
    attn_ba: np.ndarray | None
    interaction_edges: np.ndarray | None
    batch: PairBatch

    def pair_attention(self, k: int) -> np.ndarray:
        """A->B attention of pair ``k`` as (heads, n_a, n_b)."""
        counts = np.bincount(self.batch.graphs.graph_index, minlength=2 * self.batch.n_pairs)
        n_a, n_b = counts[k], counts[self.batch.n_pairs + k]
        return self.attn_ab[:, k, :n_a, :n_b]


def forward(batch: PairBatch, model: ModelParams, train: bool = False,
            stream: DropoutStream | None = None) -> ForwardResult:
    cfg = model.config
    g = batch.graphs
    h = encode(g, model, train, stream)
    attn_ab = attn_ba = edges = None
    if cfg.variant in (CROSSATT, TERNARY):
        n_a = batch.n_atoms_a
        h_a = nx.gather(h, np.arange(n_a))
        h_b = nx.gather(h, np.arange(n_a, g.n_atoms))
        seg_a = Segments.from_index(batch.pair_of_atom[:n_a], batch.n_pairs)
        seg_b = Segments.from_index(batch.pair_of_atom[n_a:], batch.n_pairs)
        h_a, h_b, attn_ab, attn_ba = cross_attention(h_a, h_b, model, seg_a, seg_b)
        h = nx.concat([h_a, h_b], axis=0)
        if cfg.variant == TERNARY:
            edges = _batch_interaction_edges(h_a.value, h_b.value, batch, cfg.topk)
            h = interaction_conv(h, batch, edges, model, train)
    elif cfg.variant != CONCAT:
        raise UnknownVariant(cfg.variant)
    pooled = pool(h, g.graph_index, g.n_graphs)
    b = batch.n_pairs
    z = nx.concat([nx.gather(pooled, np.arange(b)), nx.gather(pooled, np.arange(b, 2 * b))], axis=1)
    logit = nx.reshape(_head(z, model, "binary", _BINARY_HEAD_LAYER, train, stream), (b,))
    classes = _head(z, model, "multi", _MULTI_HEAD_LAYER, train, stream)
    return ForwardResult(logit, classes, attn_ab, attn_ba, edges, batch)


def forward_pair(graph_a: CachedGraph, graph_b: CachedGraph, model: ModelParams) -> ForwardResult:
    return forward(collate([(graph_a, graph_b)], model.dtype), model, train=False)


def encode_molecule(graph: CachedGraph, model: ModelParams) -> np.ndarray:
    """Eval-mode atom embeddings of a single molecule."""
    return encode(batch_graphs([graph], model.dtype), model, train=False).value


@dataclass(frozen=True)
class AttentionSummary:
    atom_index: int
    weight: float
    weights: tuple[float, ...]


def summarize_attention(attn_ab: np.ndarray) -> AttentionSummary:
    """Reduce one pair's (heads, n_a, n_b) map to a per-B-atom weight vector.

    Weights are averaged over heads and over A-side query atoms; ties in the
    argmax go to the lowest index.
    """
    w = attn_ab.mean(axis=0).mean(axis=0)
    idx = int(np.argmax(w))
    return AttentionSummary(idx, float(w[idx]), tuple(float(x) for x in w))


def attention_summary(graph_a: CachedGraph, graph_b: CachedGraph, model: ModelParams) -> AttentionSummary:
    """Most-attended atom of molecule B when A (e.g. ASA) queries it."""
    if model.config.variant == CONCAT:
        raise VariantHasNoAttention("the concat variant has no attention maps")
    out = forward_pair(graph_a, graph_b, model)
    return summarize_attention(out.pair_attention(0))

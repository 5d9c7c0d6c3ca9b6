"""Sequential two-phase training, evaluation and report generation.

Phase 1 trains encoder, combiner and binary head with BCE on every pair.
Phase 2 starts from the phase-1 weights with a fresh Adam state and trains
the multi-class head with masked cross-entropy (negatives carry label -1);
the trunk keeps training unless ``freeze_trunk`` is set (which also keeps its
batch-norm running statistics), and the binary head is frozen.  A trained model therefore holds two weight sets ("stages"): each
head is evaluated together with the trunk it was trained with.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .chemgraph import CachedGraph, GraphCache, parse_smiles
from .data import ASA_ID, ASA_SMILES, REFERENCE_DRUGS, DatasetBundle, PairRecord, ReferencePair
from .metrics import accuracy, f1_binary, f1_macro, f1_weighted, roc_auc
from .model import (
    CONCAT,
    CROSSATT,
    VARIANTS,
    ModelConfig,
    ModelParams,
    collate,
    count_params,
    forward,
    init_params,
    summarize_attention,
)
from .numerics import AdamState, DropoutStream, SplitMix64, StepSchedule, Tape, derive_seed
from .numerics.checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

REPORT_SCHEMA = "ddi-ablation/metrics-report/1"
BINARY, MULTICLASS = "binary", "multiclass"
_DTYPES = {"float32": np.float32, "float64": np.float64}


class NonFiniteLoss(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    pass


class MissingReferenceData(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    seed: int = 42
    base_lr: float = 1e-3
    gamma: float = 0.5
    period: int = 20
    freeze_trunk: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.period < 1:
            raise ValueError("epochs, batch_size and period must be positive")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.base_lr, self.gamma, self.period)


@dataclass
class TrainedModel:
    config: ModelConfig
    train_config: TrainConfig
    stages: dict[str, ModelParams]

    @property
    def variant(self) -> str:
        return self.config.variant

    def parameter_count(self) -> dict:
        return count_params(self.stages[BINARY])


@dataclass
class TrainResult:
    model: TrainedModel
    log: list[dict] = field(default_factory=list)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_trained(path, trained: TrainedModel, extra_meta: dict | None = None) -> None:
    params, buffers = {}, {}
    for stage, m in trained.stages.items():
        params.update({f"{stage}/{k}": v for k, v in m.arrays().items()})
        buffers.update({f"{stage}/{k}": v for k, v in m.buffers().items()})
    meta = {
        "model_config": asdict(trained.config),
        "train_config": asdict(trained.train_config),
        "stages": sorted(trained.stages),
        "parameters": trained.parameter_count(),
    }
    meta.update(extra_meta or {})
    save_checkpoint(path, params, buffers, meta)


def load_trained(path) -> TrainedModel:
    params, buffers, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    tcfg = TrainConfig(**meta["train_config"])
    stages = {}
    for stage in meta["stages"]:
        m = init_params(cfg, dtype=_DTYPES[tcfg.dtype])
        prefix = f"{stage}/"
        names = {k[len(prefix):] for k in params if k.startswith(prefix)}
        if names != set(m.params):
            raise ConfigMismatch(f"checkpoint parameters do not match variant {cfg.variant!r}")
        for name, t in m.params.items():
            value = params[prefix + name]
            if value.shape != t.shape:
                raise ConfigMismatch(f"{name}: shape {value.shape} != {t.shape}")
            t.value = value.copy()
        m.load_buffers({k[len(prefix):]: v for k, v in buffers.items() if k.startswith(prefix)})
        stages[stage] = m
    return TrainedModel(cfg, tcfg, stages)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def graph_lookup(cache: GraphCache) -> Callable[[str], CachedGraph]:
    """Cache lookup that parses SMILES missing from the cache on demand."""
    extra: dict[str, CachedGraph] = {}

    def get(smiles: str) -> CachedGraph:
        if smiles in cache:
            return cache[smiles]
        if smiles not in extra:
            extra[smiles] = CachedGraph.from_mol(parse_smiles(smiles))
        return extra[smiles]

    return get


def _trainable(model: ModelParams, phase: str, freeze_trunk: bool) -> dict[str, nx.Tensor]:
    trunk = ("encoder", "attention", "interaction")
    if phase == BINARY:
        names = [k for k in model.params if k.startswith(trunk) or k.startswith("heads.binary.")]
    else:
        names = [k for k in model.params
                 if k.startswith("heads.multi.") or (not freeze_trunk and k.startswith(trunk))]
    return {k: model.params[k] for k in names}


def train(model_config: ModelConfig, records: Sequence[PairRecord], cache: GraphCache,
          config: TrainConfig = TrainConfig(), out_dir=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run both phases; writes ``checkpoint_binary.npz``, ``checkpoint.npz`` and
    ``train_log.jsonl`` to ``out_dir`` when given."""
    if not records:
        raise ValueError("no training records")
    dtype = _DTYPES[config.dtype]
    lookup = graph_lookup(cache)
    graphs = [(lookup(r.smiles1), lookup(r.smiles2)) for r in records]
    labels = np.array([r.binary_label for r in records])
    types = np.array([r.type_code for r in records])
    schedule = config.schedule
    model = init_params(model_config, seed=config.seed, dtype=dtype)
    stages: dict[str, ModelParams] = {}
    history: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    log_fh = open(out / "train_log.jsonl", "w") if out is not None else None
    try:
        for phase_id, phase in enumerate((BINARY, MULTICLASS)):
            if phase == MULTICLASS:
                model = model.copy()
            params = _trainable(model, phase, config.freeze_trunk)
            state = AdamState()
            order_rng = SplitMix64(derive_seed(config.seed, phase_id))
            for epoch in range(config.epochs):
                order = order_rng.permutation(len(records))
                total, weight, masked = 0.0, 0, 0
                for b, start in enumerate(range(0, len(order), config.batch_size)):
                    idx = order[start:start + config.batch_size]
                    batch = collate([graphs[i] for i in idx], dtype)
                    stream = DropoutStream(config.seed, epoch, b, phase_id)
                    with Tape() as tape:
                        res = forward(batch, model, train=True, stream=stream)
                        if phase == BINARY:
                            loss = nx.bce_with_logits(res.binary_logit, labels[idx])
                            w = len(idx)
                        else:
                            batch_types = types[idx]
                            assert batch_types.min() >= -1
                            loss = nx.masked_cross_entropy(res.class_logits, batch_types)
                            w = int(np.sum(batch_types != -1))
                    value = float(loss.value)
                    if not math.isfinite(value):
                        raise NonFiniteLoss(
                            f"non-finite {phase} loss {value} at epoch {epoch}, batch {b} "
                            f"(variant {model_config.variant})")
                    if w == 0:
                        masked += 1
                        continue
                    grads = nx.backward(tape, loss, params.values())
                    nx.adam_step(params, {k: grads[p] for k, p in params.items()}, state, schedule, epoch)
                    total += value * w
                    weight += w
                rec = {"phase": phase, "epoch": epoch, "loss": total / weight if weight else 0.0,
                       "lr": schedule.lr(epoch)}
                if masked:
                    rec["fully_masked_batches"] = masked
                history.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if on_epoch is not None:
                    on_epoch(rec)
                log.debug("%s", rec)
            if phase == MULTICLASS and config.freeze_trunk:
                # a frozen trunk keeps its phase-1 normalization statistics too
                model.bn = stages[BINARY].copy().bn
            stages[phase] = model
            if out is not None:
                partial = TrainedModel(model_config, config, dict(stages))
                name = "checkpoint_binary.npz" if phase == BINARY else "checkpoint.npz"
                save_trained(out / name, partial)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(TrainedModel(model_config, config, stages), history)


# --------------------------------------------------------------------------
# inference and evaluation
# --------------------------------------------------------------------------

@dataclass
class Predictions:
    probability: np.ndarray
    class_probs: np.ndarray | None
    attn_ab: list[np.ndarray] | None


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict_pairs(trained: TrainedModel, pairs: Sequence[tuple[CachedGraph, CachedGraph]],
                  batch_size: int = 256, multiclass: bool = True, attention: bool = False) -> Predictions:
    """Eval-mode predictions; attention maps come from the binary stage."""
    dtype = trained.stages[BINARY].dtype
    probs, cls, attn = [], [], []
    for start in range(0, len(pairs), batch_size):
        batch = collate(pairs[start:start + batch_size], dtype)
        res = forward(batch, trained.stages[BINARY], train=False)
        probs.append(_sigmoid(res.binary_logit.value.astype(np.float64)))
        if attention and res.attn_ab is not None:
            attn.extend(res.pair_attention(k) for k in range(batch.n_pairs))
        if multiclass:
            res_m = forward(batch, trained.stages[MULTICLASS], train=False)
            cls.append(_softmax(res_m.class_logits.value.astype(np.float64)))
    return Predictions(
        np.concatenate(probs) if probs else np.zeros(0),
        np.concatenate(cls) if cls else None,
        attn if attention and trained.variant != CONCAT else None,
    )


def _pairs_for(records: Sequence[PairRecord], cache: GraphCache):
    lookup = graph_lookup(cache)
    return [(lookup(r.smiles1), lookup(r.smiles2)) for r in records]


def evaluate(trained: TrainedModel, records: Sequence[PairRecord], cache: GraphCache,
             provenance: dict | None = None, threshold: float = 0.5) -> dict:
    """MetricsReport for ``records``; multi-class metrics use positive pairs only."""
    preds = predict_pairs(trained, _pairs_for(records, cache))
    labels = np.array([r.binary_label for r in records])
    types = np.array([r.type_code for r in records])
    binary_pred = (preds.probability >= threshold).astype(int)
    binary = {
        "n_pairs": int(len(records)),
        "auc": roc_auc(preds.probability, labels) if 0 < labels.sum() < len(labels) else None,
        "accuracy": accuracy(binary_pred, labels),
        "f1": f1_binary(binary_pred, labels),
    }
    pos = np.flatnonzero(types != -1)
    predicted_type = preds.class_probs.argmax(axis=1)
    confidence = preds.class_probs.max(axis=1)
    multiclass = {"n_pairs": int(len(pos))}
    if len(pos):
        t, p = types[pos], predicted_type[pos]
        assert t.min() >= 0
        multiclass.update({
            "accuracy": accuracy(p, t),
            "f1_macro": f1_macro(p, t, trained.config.n_classes),
            "f1_weighted": f1_weighted(p, t, trained.config.n_classes),
            "f1_macro_classes": int(len(np.union1d(p, t))),
        })
    predictions = [
        {"drug1_id": r.drug1_id, "drug2_id": r.drug2_id, "label": r.binary_label, "type_code": r.type_code,
         "probability": float(preds.probability[i]), "predicted_type": int(predicted_type[i]),
         "confidence": float(confidence[i])}
        for i, r in enumerate(records)
    ]
    return {
        "schema": REPORT_SCHEMA,
        "kind": "evaluation",
        "variant": trained.variant,
        "parameters": trained.parameter_count(),
        "config": {"model": asdict(trained.config), "train": asdict(trained.train_config),
                   "threshold": threshold},
        "provenance": provenance or {},
        "binary": binary,
        "multiclass": multiclass,
        "predictions": predictions,
    }


def missing_reference_message() -> str:
    ids = ", ".join(f"{name} ({did})" for name, did in REFERENCE_DRUGS.items())
    return ("MissingReferenceData: the ASA report needs a reference file "
            "(partner_name,drug_id,smiles,label,mechanism) with SMILES for: " + ids)


def asa_report(trained: TrainedModel, bundle: DatasetBundle, cache: GraphCache,
               references: Sequence[ReferencePair] | None = None, provenance: dict | None = None,
               highlight: int = 10, asa_id: str = ASA_ID) -> dict:
    refs = list(references if references is not None else bundle.reference_pairs)
    if not refs:
        raise MissingReferenceData(missing_reference_message())
    lookup = graph_lookup(cache)
    asa_smiles = next((r.smiles1 if r.drug1_id == asa_id else r.smiles2 for r in bundle.asa_holdout), ASA_SMILES)
    has_attention = trained.variant != CONCAT

    ref_pairs = [(lookup(asa_smiles), lookup(r.smiles)) for r in refs]
    ref_pred = predict_pairs(trained, ref_pairs, multiclass=False, attention=has_attention)
    ref_rows = []
    for k, r in enumerate(refs):
        p = float(ref_pred.probability[k])
        row = {"partner_name": r.partner_name, "drug_id": r.drug_id, "mechanism": r.mechanism,
               "label": r.label, "probability": p, "correct": bool((p >= 0.5) == (r.label == 1))}
        if has_attention:
            s = summarize_attention(ref_pred.attn_ab[k])
            row["attention"] = {"most_attended_atom": s.atom_index, "weight": s.weight,
                                "weights": list(s.weights)}
        ref_rows.append(row)

    hold = list(bundle.asa_holdout)
    hold_pred = predict_pairs(trained, _pairs_for(hold, cache))
    hold_rows = []
    for k, r in enumerate(hold):
        probs = hold_pred.class_probs[k]
        t = int(np.argmax(probs))
        hold_rows.append({
            "partner_id": r.drug2_id if r.drug1_id == asa_id else r.drug1_id,
            "true_type": r.type_code, "predicted_type": t, "confidence": float(probs[t]),
            "correct": t == r.type_code, "highlighted": k < highlight,
        })
    return {
        "schema": REPORT_SCHEMA,
        "kind": "asa-report",
        "variant": trained.variant,
        "parameters": trained.parameter_count(),
        "provenance": provenance or {},
        "reference": {"rows": ref_rows, "correct": sum(r["correct"] for r in ref_rows), "total": len(ref_rows)},
        "holdout": {
            "rows": hold_rows,
            "n_pairs": len(hold_rows),
            "correct": sum(r["correct"] for r in hold_rows),
            "highlighted_correct": sum(r["correct"] for r in hold_rows if r["highlighted"]),
            "highlighted_total": sum(r["highlighted"] for r in hold_rows),
        },
    }


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------

COMPARISON_ROWS = (
    ("binary", "auc"), ("binary", "accuracy"), ("binary", "f1"),
    ("multiclass", "accuracy"), ("multiclass", "f1_macro"), ("multiclass", "f1_weighted"),
)


def _delta(a, b):
    return None if a is None or b is None else a - b


def ablate(bundle: DatasetBundle, cache: GraphCache, base_config: ModelConfig = ModelConfig(),
           config: TrainConfig = TrainConfig(), out_dir=None, provenance: dict | None = None,
           variants: Sequence[str] = VARIANTS) -> dict:
    """Train and evaluate each variant under one config; compare against Concat."""
    out = Path(out_dir) if out_dir is not None else None
    reports, params = {}, {}
    for v in variants:
        sub = out / v if out is not None else None
        if sub is not None:
            sub.mkdir(parents=True, exist_ok=True)
        result = train(replace(base_config, variant=v), bundle.train, cache, config, out_dir=sub)
        reports[v] = evaluate(result.model, bundle.test, cache, provenance)
        params[v] = result.model.parameter_count()
        if sub is not None:
            write_report(sub / "metrics.json", reports[v])
    table = {}
    for section, metric in COMPARISON_ROWS:
        row = {v: reports[v][section].get(metric) for v in variants}
        if CONCAT in variants:
            for v in variants:
                if v != CONCAT:
                    row[f"delta_{v}"] = _delta(row[v], row[CONCAT])
        table[f"{section}.{metric}"] = row
    table["parameters"] = {v: params[v]["total"] for v in variants}
    if CONCAT in variants:
        for v in variants:
            if v != CONCAT:
                table["parameters"][f"delta_{v}"] = params[v]["total"] - params[CONCAT]["total"]
    highlight = None
    if CONCAT in variants and CROSSATT in variants:
        highlight = {
            "delta_auc": table["binary.auc"][f"delta_{CROSSATT}"],
            "delta_f1_macro": table["multiclass.f1_macro"][f"delta_{CROSSATT}"],
            "delta_parameters": table["parameters"][f"delta_{CROSSATT}"],
        }
    return {
        "schema": REPORT_SCHEMA,
        "kind": "ablation",
        "config": {"model": asdict(base_config), "train": asdict(config)},
        "provenance": provenance or {},
        "variants": list(variants),
        "parameters": params,
        "comparison": table,
        "crossatt_vs_concat": highlight,
        "reports": {v: {k: reports[v][k] for k in ("binary", "multiclass")} for v in variants},
    }


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def report_bytes(report: dict) -> bytes:
    return (json.dumps(report, sort_keys=True, indent=2) + "\n").encode()


def write_report(path, report: dict) -> None:
    Path(path).write_bytes(report_bytes(report))


def _fmt(x) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, float):
        return f"{x:+.3f}" if x < 0 else f"{x:.3f}"
    return f"{x:,}" if isinstance(x, int) else str(x)


def render_table(report: dict) -> str:
    """Plain-text rendering of an evaluation, ASA or ablation report."""
    kind = report.get("kind")
    lines = []
    if kind == "ablation":
        vs = report["variants"]
        cols = vs + [f"delta_{v}" for v in vs if v != CONCAT and CONCAT in vs]
        lines.append("metric".ljust(22) + "".join(c.rjust(16) for c in cols))
        for name, row in report["comparison"].items():
            lines.append(name.ljust(22) + "".join(_fmt(row.get(c)).rjust(16) for c in cols))
        h = report.get("crossatt_vs_concat")
        if h:
            lines.append("")
            lines.append(f"CrossAtt vs Concat: dAUC {_fmt(h['delta_auc'])}, "
                         f"dF1-macro {_fmt(h['delta_f1_macro'])}, dParams {h['delta_parameters']:,}")
    elif kind == "evaluation":
        lines.append(f"variant {report['variant']}  parameters {report['parameters']['total']:,}")
        for section in ("binary", "multiclass"):
            for k, v in report[section].items():
                lines.append(f"  {section}.{k}".ljust(28) + _fmt(v))
    elif kind == "asa-report":
        lines.append(f"variant {report['variant']}")
        lines.append("Reference pairs (binary)")
        for r in report["reference"]["rows"]:
            mark = "ok " if r["correct"] else "err"
            att = f"  atom {r['attention']['most_attended_atom']}" if "attention" in r else ""
            lines.append(f"  {r['partner_name']:<14}{r['drug_id']:<10}label {r['label']}  "
                         f"{mark} {r['probability']:.3f}{att}")
        lines.append(f"  correct {report['reference']['correct']}/{report['reference']['total']}")
        lines.append("ASA holdout (multi-class)")
        for r in report["holdout"]["rows"]:
            if r["highlighted"]:
                lines.append(f"  {r['partner_id']:<10}true {r['true_type']:>2}  "
                             f"pred {r['predicted_type']:>2} / {r['confidence']:.3f}")
        h = report["holdout"]
        lines.append(f"  correct {h['highlighted_correct']}/{h['highlighted_total']} highlighted, "
                     f"{h['correct']}/{h['n_pairs']} overall")
    else:
        lines.append(json.dumps(report, sort_keys=True, indent=2))
    return "\n".join(lines)

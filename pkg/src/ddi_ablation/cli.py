"""Command-line driver: prepare, train, evaluate, asa-report, ablate, predict.

Exit codes: 0 success, 2 input error, 3 numeric failure, 4 config mismatch,
64 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .chemgraph import CacheBuildError, CachedGraph, SmilesError, build_cache, load_cache, parse_smiles
from .data import (
    ParseError,
    SplitSpec,
    load_bundle,
    load_pairs,
    load_reference_pairs,
    prepare_dataset,
    save_bundle,
    sha256_file,
)
from .model import CONCAT, VARIANTS, ModelConfig, UnknownVariant, collate, forward, summarize_attention
from .pipeline import (
    ConfigMismatch,
    MissingReferenceData,
    NonFiniteLoss,
    TrainConfig,
    ablate,
    asa_report,
    evaluate,
    load_trained,
    missing_reference_message,
    render_table,
    report_bytes,
    train,
    write_report,
)
from .synthetic import SyntheticSpec, synthetic_bundle

log = logging.getLogger("ddi_ablation")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CONFIG, EXIT_USAGE = 0, 2, 3, 4, 64
CACHE_FILE = "graphs.npz"
MANIFEST_FILE = "manifest.json"

PAIR_SCHEMA_HELP = """\
pair file (CSV, UTF-8, header required):
  drug1_id,drug2_id,smiles1,smiles2,type_code
  type_code is 0..85 for an annotated interaction or -1 for a negative pair.
reference file (ASA partners, CSV):
  partner_name,drug_id,smiles,label,mechanism   (label 0 or 1)
"""

SMILES_HELP = """\
SMILES subset:
  organic-subset atoms B C N O P S F Cl Br I and aromatic b c n o p s;
  bracket atoms [Sym], [SymHn], [Sym+], [Sym-2] with any element symbol;
  bonds - = # : ; branches ( ); ring closures 0-9 and %nn.
  Rejected with the offending position: stereo (@, /, \\), isotopes,
  wildcards (*), atom classes, '$' bonds and multi-fragment '.' input.
  Explicit [H] atoms are folded into the neighbour's hydrogen count.
"""


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run; defaults follow the reference protocol."""

    variant: str = "crossatt"
    hidden_dim: int = 64
    n_mp_layers: int = 3
    n_heads: int = 4
    dropout_p: float = 0.2
    n_classes: int = 86
    topk: int = 3
    head_hidden: int = 256
    epochs: int = 60
    batch_size: int = 64
    seed: int = 42
    base_lr: float = 1e-3
    gamma: float = 0.5
    period: int = 20
    freeze_trunk: bool = False
    dtype: str = "float32"
    train_fraction: float = 0.8
    threshold: float = 0.5

    def model_config(self, variant: str | None = None) -> ModelConfig:
        return ModelConfig(variant=variant or self.variant, hidden_dim=self.hidden_dim,
                           n_mp_layers=self.n_mp_layers, n_heads=self.n_heads, dropout_p=self.dropout_p,
                           n_classes=self.n_classes, topk=self.topk, head_hidden=self.head_hidden)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                           base_lr=self.base_lr, gamma=self.gamma, period=self.period,
                           freeze_trunk=self.freeze_trunk, dtype=self.dtype)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(seed=self.seed, train_fraction=self.train_fraction)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    kind = type(getattr(RunConfig(), name))
    if kind is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes"):
            return True
        if str(value).lower() in ("0", "false", "no"):
            return False
        raise InputError(f"config field {name!r} must be a boolean, got {value!r}")
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise InputError(f"config field {name!r} must be an integer, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise InputError(f"config field {name!r} must be {kind.__name__}, got {value!r}") from None


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file values, then flag overrides; unknown keys are rejected."""
    values = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise InputError(f"{path}: config must be a JSON object")
        unknown = sorted(set(raw) - set(_FIELDS))
        if unknown:
            raise InputError(f"{path}: unknown config keys {unknown}")
        values.update(raw)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    try:
        cfg.model_config()
        cfg.train_config()
        cfg.split_spec()
    except ValueError as exc:
        raise InputError(f"invalid config: {exc}") from None
    return cfg


def _overrides(args, names) -> dict:
    return {n: getattr(args, n, None) for n in names}


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"cannot read {path}: no such file")
    return p


def _checksums(*paths) -> dict:
    return {Path(p).name: sha256_file(p) for p in paths if p is not None and Path(p).is_file()}


def _bundle_files(bundle_dir: Path) -> list[Path]:
    names = ("train.csv", "test.csv", "asa_holdout.csv", "references.csv", CACHE_FILE)
    return [bundle_dir / n for n in names if (bundle_dir / n).is_file()]


def _load_bundle_dir(path):
    d = Path(path)
    if not (d / "train.csv").is_file() or not (d / CACHE_FILE).is_file():
        raise InputError(f"{path} is not a prepared bundle (run 'prepare' first)")
    return d, load_bundle(d), load_cache(d / CACHE_FILE)


_MODE = {"deterministic": True}


def _provenance(cfg: RunConfig, inputs) -> dict:
    return {"run_config": asdict(cfg), "deterministic": _MODE["deterministic"],
            "inputs": _checksums(*inputs)}


@contextlib.contextmanager
def _atomic_dir(target: Path):
    """Build a directory next to ``target`` and move it into place on success."""
    if target.exists() and any(target.iterdir()):
        raise InputError(f"output directory {target} exists and is not empty")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
        if target.exists():
            target.rmdir()
        os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _write_json(path, obj) -> None:
    Path(path).write_bytes(report_bytes(obj))


def _emit(report: dict, out, fmt: str) -> None:
    if out is not None:
        write_report(out, report)
    if fmt == "table":
        print(render_table(report))
    elif out is None:
        sys.stdout.write(report_bytes(report).decode())


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    cfg = load_run_config(args.config, _overrides(args, ["seed", "train_fraction"]))
    pairs_path = _require_file(args.pairs)
    refs_path = _require_file(args.references) if args.references else None
    positives = load_pairs(pairs_path)
    if any(r.type_code == -1 for r in positives):
        raise InputError(f"{pairs_path}: prepare expects positive pairs only (type_code 0..85)")
    refs = load_reference_pairs(refs_path) if refs_path else []
    prepared = prepare_dataset(positives, cfg.split_spec(), references=refs)
    cache = build_cache(prepared.bundle.all_smiles())
    with _atomic_dir(Path(args.out)) as tmp:
        save_bundle(tmp, prepared.bundle)
        cache.save(tmp / CACHE_FILE)
        counts = dict(prepared.counts, cached_graphs=len(cache),
                      other_element_atoms=cache.other_element_atoms)
        manifest = {
            "schema": "ddi-ablation/manifest/1",
            "kind": "prepare",
            "counts": counts,
            "provenance": _provenance(cfg, [pairs_path, refs_path]),
            "outputs": _checksums(*_bundle_files(tmp)),
        }
        _write_json(tmp / MANIFEST_FILE, manifest)
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    cfg = load_run_config(args.config, _overrides(args, ["seed", "train_fraction"]))
    spec = SyntheticSpec(n_pairs=args.n_pairs, seed=args.generator_seed)
    bundle = synthetic_bundle(spec, cfg.split_spec())
    cache = build_cache(bundle.all_smiles())
    with _atomic_dir(Path(args.out)) as tmp:
        save_bundle(tmp, bundle)
        cache.save(tmp / CACHE_FILE)
        counts = {"train": len(bundle.train), "test": len(bundle.test),
                  "positives": sum(r.binary_label for r in bundle.train + bundle.test),
                  "cached_graphs": len(cache)}
        _write_json(tmp / MANIFEST_FILE, {
            "schema": "ddi-ablation/manifest/1",
            "kind": "synthetic",
            "generator": asdict(spec),
            "counts": counts,
            "provenance": _provenance(cfg, []),
            "outputs": _checksums(*_bundle_files(tmp)),
        })
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


_TRAIN_KEYS = ["variant", "epochs", "batch_size", "seed", "freeze_trunk", "dtype"]


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _overrides(args, _TRAIN_KEYS))
    bundle_dir, bundle, cache = _load_bundle_dir(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg.model_config(), bundle.train, cache, cfg.train_config(), out_dir=out)
    run = {
        "schema": "ddi-ablation/manifest/1",
        "kind": "train",
        "variant": cfg.variant,
        "parameters": result.model.parameter_count(),
        "provenance": _provenance(cfg, _bundle_files(bundle_dir)),
        "outputs": _checksums(out / "checkpoint_binary.npz", out / "checkpoint.npz", out / "train_log.jsonl"),
        "final": {p: next(r for r in reversed(result.log) if r["phase"] == p)["loss"]
                  for p in ("binary", "multiclass")},
    }
    _write_json(out / MANIFEST_FILE, run)
    print(json.dumps({"variant": cfg.variant, "parameters": run["parameters"]["total"],
                      "final_loss": run["final"]}, sort_keys=True))
    return EXIT_OK


def _load_checkpoint(path, cfg: RunConfig | None = None):
    trained = load_trained(_require_file(path))
    if cfg is not None:
        expected = cfg.model_config(trained.variant)
        if expected != trained.config:
            raise ConfigMismatch(f"checkpoint model config {asdict(trained.config)} "
                                 f"does not match run config {asdict(expected)}")
    return trained


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, _overrides(args, ["threshold"]))
    bundle_dir, bundle, cache = _load_bundle_dir(args.bundle)
    trained = _load_checkpoint(args.checkpoint, cfg if args.config else None)
    records = bundle.test if args.split == "test" else bundle.train
    prov = _provenance(cfg, [args.checkpoint, *_bundle_files(bundle_dir)])
    report = evaluate(trained, records, cache, prov, threshold=cfg.threshold)
    report["split"] = args.split
    _emit(report, args.out, args.format)
    return EXIT_OK


def cmd_asa_report(args) -> int:
    cfg = load_run_config(args.config)
    bundle_dir, bundle, cache = _load_bundle_dir(args.bundle)
    trained = _load_checkpoint(args.checkpoint, cfg if args.config else None)
    refs = None
    if args.references:
        refs = load_reference_pairs(_require_file(args.references))
    elif not bundle.reference_pairs:
        raise MissingReferenceData(missing_reference_message())
    prov = _provenance(cfg, [args.checkpoint, args.references, *_bundle_files(bundle_dir)])
    report = asa_report(trained, bundle, cache, refs, prov)
    _emit(report, args.out, args.format)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, _overrides(args, ["epochs", "batch_size", "seed", "period"]))
    bundle_dir, bundle, cache = _load_bundle_dir(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = tuple(args.variants.split(",")) if args.variants else VARIANTS
    for v in variants:
        if v not in VARIANTS:
            raise UnknownVariant(f"unknown variant {v!r}; expected one of {VARIANTS}")
    report = ablate(bundle, cache, cfg.model_config(), cfg.train_config(), out,
                    _provenance(cfg, _bundle_files(bundle_dir)), variants)
    write_report(out / "comparison.json", report)
    (out / "comparison.txt").write_text(render_table(report) + "\n")
    print(render_table(report))
    return EXIT_OK


def _parse_for_predict(smiles: str, which: str) -> CachedGraph:
    try:
        return CachedGraph.from_mol(parse_smiles(smiles))
    except SmilesError as exc:
        raise InputError(f"--smiles-{which}: {exc}") from None


def cmd_predict(args) -> int:
    trained = _load_checkpoint(args.checkpoint)
    ga = _parse_for_predict(args.smiles_a, "a")
    gb = _parse_for_predict(args.smiles_b, "b")
    batch = collate([(ga, gb)], trained.stages["binary"].dtype)
    res = forward(batch, trained.stages["binary"], train=False)
    logit = float(res.binary_logit.value[0])
    prob = 0.5 * (1 + np.tanh(0.5 * logit))
    z = forward(batch, trained.stages["multiclass"], train=False).class_logits.value[0].astype(np.float64)
    p = np.exp(z - z.max())
    p /= p.sum()
    top = np.argsort(-p, kind="stable")[:args.top]
    out = {
        "smiles_a": args.smiles_a,
        "smiles_b": args.smiles_b,
        "variant": trained.variant,
        "probability": float(prob),
        "top_types": [{"type_code": int(t), "confidence": float(p[t])} for t in top],
        "provenance": {"inputs": _checksums(args.checkpoint),
                       "model_config": asdict(trained.config)},
    }
    if trained.variant != CONCAT:
        s = summarize_attention(res.pair_attention(0))
        out["attention"] = {"most_attended_atom_b": s.atom_index, "weight": s.weight,
                            "weights": list(s.weights)}
    sys.stdout.write(report_bytes(out).decode())
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="ddi-ablation",
        description="Siamese GNN drug-drug interaction ablation (Concat / CrossAtt / Ternary).",
        epilog=PAIR_SCHEMA_HELP + "\n" + SMILES_HELP
        + "\nexit codes: 0 ok, 2 input error, 3 non-finite loss, 4 config mismatch, 64 usage",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    p.add_argument("--nondeterministic", action="store_true",
                   help="allow multi-threaded BLAS reductions (faster, not bit-reproducible)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, epilog=PAIR_SCHEMA_HELP
                            + "\n" + SMILES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="JSON run config; flags override its values")
        sp.set_defaults(func=func)
        return sp

    sp = add("prepare", cmd_prepare, "negatives, ASA holdout, split and graph cache")
    sp.add_argument("--pairs", required=True, help="positive pair file")
    sp.add_argument("--references", help="optional ASA reference partner file")
    sp.add_argument("--out", required=True, help="bundle directory (must not exist or be empty)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--train-fraction", dest="train_fraction", type=float)

    sp = add("make-synthetic", cmd_make_synthetic, "write the planted-mechanism synthetic bundle")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-pairs", dest="n_pairs", type=int, default=2000)
    sp.add_argument("--generator-seed", dest="generator_seed", type=int, default=42)
    sp.add_argument("--seed", type=int, help="split seed")
    sp.add_argument("--train-fraction", dest="train_fraction", type=float)

    sp = add("train", cmd_train, "train one variant (binary phase, then multi-class phase)")
    sp.add_argument("--variant", required=True, choices=VARIANTS)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--freeze-trunk", dest="freeze_trunk", action="store_const", const=True)
    sp.add_argument("--dtype", choices=("float32", "float64"))

    sp = add("evaluate", cmd_evaluate, "metrics report for a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out", help="report file (JSON); stdout when omitted")
    sp.add_argument("--format", choices=("json", "table"), default="json")

    sp = add("asa-report", cmd_asa_report, "reference-partner and ASA holdout tables")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--references", help="reference partner file (overrides the bundle's)")
    sp.add_argument("--out")
    sp.add_argument("--format", choices=("json", "table"), default="json")

    sp = add("ablate", cmd_ablate, "train and evaluate all variants under one config")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variants", help="comma-separated subset (default: all)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--period", type=int)

    sp = add("predict", cmd_predict, "score one pair of SMILES")
    sp.add_argument("--smiles-a", dest="smiles_a", required=True)
    sp.add_argument("--smiles-b", dest="smiles_b", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--top", type=int, default=5)
    return p


def _blas_limit(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _MODE["deterministic"] = not args.nondeterministic
    try:
        with _blas_limit(not args.nondeterministic):
            return args.func(args)
    except (InputError, ParseError, SmilesError, CacheBuildError, MissingReferenceData,
            UnknownVariant) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

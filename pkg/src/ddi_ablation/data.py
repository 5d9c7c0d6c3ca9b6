"""Pair tables, negative sampling, the ASA holdout and the train/test split.

Pair file format (UTF-8, comma separated, header required)::

    drug1_id,drug2_id,smiles1,smiles2,type_code

``type_code`` is 0..85 for annotated interactions or -1 for a sampled
negative; the binary label is derived from it.

Reference file format (curated ASA partners)::

    partner_name,drug_id,smiles,label,mechanism
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .numerics.rng import SplitMix64

ASA_ID = "DB00945"
ASA_SMILES = "CC(=O)Oc1ccccc1C(=O)O"
N_TYPES = 86
PAIR_COLUMNS = ("drug1_id", "drug2_id", "smiles1", "smiles2", "type_code")
REFERENCE_COLUMNS = ("partner_name", "drug_id", "smiles", "label", "mechanism")

# DrugBank identifiers of the seven curated ASA reference partners.
REFERENCE_DRUGS = {
    "Warfarin": "DB00682",
    "Ibuprofen": "DB01050",
    "Methotrexate": "DB00563",
    "Sertraline": "DB01104",
    "Probenecid": "DB01032",
    "Paracetamol": "DB00316",
    "Vitamin C": "DB00126",
}


class ParseError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(where + message)
        self.path = path
        self.line = line


class InvalidTypeCode(ParseError):
    pass


class MissingSmiles(ParseError):
    pass


@dataclass(frozen=True)
class PairRecord:
    drug1_id: str
    drug2_id: str
    smiles1: str
    smiles2: str
    type_code: int

    def __post_init__(self):
        if not (self.type_code == -1 or 0 <= self.type_code < N_TYPES):
            raise InvalidTypeCode(f"type code {self.type_code} outside -1..{N_TYPES - 1}")

    @property
    def binary_label(self) -> int:
        return 0 if self.type_code == -1 else 1

    @property
    def key(self) -> frozenset:
        return frozenset((self.drug1_id, self.drug2_id))

    def involves(self, drug_id: str) -> bool:
        return drug_id in (self.drug1_id, self.drug2_id)


@dataclass(frozen=True)
class ReferencePair:
    partner_name: str
    drug_id: str
    smiles: str
    label: int
    mechanism: str


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 42
    train_fraction: float = 0.8
    negative_ratio: float = 1.0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.negative_ratio != 1.0:
            raise ValueError("only 1:1 negative sampling is supported")


@dataclass(frozen=True)
class DatasetBundle:
    train: tuple[PairRecord, ...]
    test: tuple[PairRecord, ...]
    asa_holdout: tuple[PairRecord, ...]
    reference_pairs: tuple[ReferencePair, ...] = ()

    def all_smiles(self) -> set[str]:
        out = {s for r in (*self.train, *self.test, *self.asa_holdout) for s in (r.smiles1, r.smiles2)}
        out.update(r.smiles for r in self.reference_pairs)
        if self.reference_pairs:
            out.add(ASA_SMILES)
        return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _check_header(header, expected, path):
    if header is None:
        return False
    cols = [c.strip() for c in header]
    if tuple(cols) != expected:
        raise ParseError(f"expected header {','.join(expected)}, got {','.join(cols)}", path, 1)
    return True


def load_pairs(path) -> list[PairRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if not _check_header(next(reader, None), PAIR_COLUMNS, path):
            return records
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(PAIR_COLUMNS):
                raise ParseError(f"expected {len(PAIR_COLUMNS)} fields, got {len(row)}", path, line)
            d1, d2, s1, s2, t = (c.strip() for c in row)
            if not s1 or not s2:
                raise ParseError("empty SMILES", path, line)
            try:
                code = int(t)
            except ValueError:
                raise ParseError(f"non-integer type code {t!r}", path, line) from None
            if not (code == -1 or 0 <= code < N_TYPES):
                raise InvalidTypeCode(f"type code {code} outside -1..{N_TYPES - 1}", path, line)
            records.append(PairRecord(d1, d2, s1, s2, code))
    return records


def write_pairs(path, records: Iterable[PairRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIR_COLUMNS)
        for r in records:
            w.writerow((r.drug1_id, r.drug2_id, r.smiles1, r.smiles2, r.type_code))


def load_reference_pairs(path) -> list[ReferencePair]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty reference file", path, 1)
        cols = [c.strip() for c in header]
        if "smiles" not in cols:
            raise MissingSmiles("reference file has no smiles column", path, 1)
        missing = [c for c in REFERENCE_COLUMNS if c not in cols]
        if missing:
            raise ParseError(f"missing columns {missing}", path, 1)
        idx = {c: cols.index(c) for c in REFERENCE_COLUMNS}
        for row in reader:
            if not row:
                continue
            line = reader.line_num
            if len(row) != len(cols):
                raise ParseError(f"expected {len(cols)} fields, got {len(row)}", path, line)
            get = {c: row[i].strip() for c, i in idx.items()}
            if not get["smiles"]:
                raise MissingSmiles(f"no SMILES for {get['partner_name']}", path, line)
            if get["label"] not in ("0", "1"):
                raise ParseError(f"label must be 0 or 1, got {get['label']!r}", path, line)
            out.append(ReferencePair(get["partner_name"], get["drug_id"], get["smiles"],
                                     int(get["label"]), get["mechanism"]))
    return out


def drug_smiles(records: Iterable[PairRecord]) -> dict[str, str]:
    """First-seen SMILES per drug id."""
    out: dict[str, str] = {}
    for r in records:
        out.setdefault(r.drug1_id, r.smiles1)
        out.setdefault(r.drug2_id, r.smiles2)
    return out


@dataclass(frozen=True)
class NegativeSample:
    records: tuple[PairRecord, ...]
    self_pair_rejections: int
    positive_collisions: int
    duplicate_rejections: int


def sample_negatives(positives: Sequence[PairRecord], seed: int = 42, exclude: Iterable[str] = (),
                     reject_positives: bool = True) -> NegativeSample:
    """Draw ``len(positives)`` negative pairs uniformly over the drug set.

    Drugs are ordered by id and pairs drawn as two independent uniform
    indices from a :class:`SplitMix64` stream.  Self-pairs, already drawn
    pairs and (by default) pairs that are known positives are rejected and
    redrawn; the rejection counts are returned.  Drugs in ``exclude`` never
    appear.
    """
    smiles = drug_smiles(positives)
    excluded = set(exclude)
    drugs = sorted(d for d in smiles if d not in excluded)
    n = len(drugs)
    need = len(positives)
    if need and n < 2:
        raise ValueError("negative sampling needs at least two drugs")
    known = {r.key for r in positives}
    admissible = n * (n - 1) // 2
    if reject_positives:
        admissible -= sum(1 for k in known if len(k) == 2 and not (k & excluded) and k <= set(drugs))
    if need > admissible:
        raise ValueError(f"only {admissible} admissible negative pairs for {need} positives")
    rng = SplitMix64(seed)
    seen: set[frozenset] = set()
    out = []
    self_pairs = collisions = dups = 0
    while len(out) < need:
        a, b = drugs[rng.below(n)], drugs[rng.below(n)]
        if a == b:
            self_pairs += 1
            continue
        key = frozenset((a, b))
        if reject_positives and key in known:
            collisions += 1
            continue
        if key in seen:
            dups += 1
            continue
        seen.add(key)
        out.append(PairRecord(a, b, smiles[a], smiles[b], -1))
    return NegativeSample(tuple(out), self_pairs, collisions, dups)


def extract_asa_holdout(pairs: Sequence[PairRecord], asa_id: str = ASA_ID):
    held = [r for r in pairs if r.involves(asa_id)]
    rest = [r for r in pairs if not r.involves(asa_id)]
    return held, rest


def split_sizes(n: int, train_fraction: float = 0.8) -> tuple[int, int]:
    n_train = int(n * train_fraction)
    return n_train, n - n_train


def split(pairs: Sequence[PairRecord], spec: SplitSpec = SplitSpec()):
    """Fisher-Yates shuffle with SplitMix64(seed); first floor(f*n) go to train."""
    order = SplitMix64(spec.seed).permutation(len(pairs))
    n_train, _ = split_sizes(len(pairs), spec.train_fraction)
    shuffled = [pairs[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


@dataclass(frozen=True)
class PreparedData:
    bundle: DatasetBundle
    counts: dict


def prepare_dataset(positives: Sequence[PairRecord], spec: SplitSpec = SplitSpec(),
                    asa_id: str = ASA_ID, references: Sequence[ReferencePair] = ()) -> PreparedData:
    """Negatives, ASA holdout and split, in that order.

    Negatives are drawn against the full positive set but never involve the
    held-out drug, so removing its pairs afterwards leaves only positives.
    """
    negs = sample_negatives(positives, spec.seed, exclude=(asa_id,))
    combined = list(positives) + list(negs.records)
    held, rest = extract_asa_holdout(combined, asa_id)
    train, test = split(rest, spec)
    counts = {
        "positives": len(positives),
        "negatives": len(negs.records),
        "combined": len(combined),
        "asa_pairs": len(held),
        "asa_types": len({r.type_code for r in held}),
        "train": len(train),
        "test": len(test),
        "negative_self_pair_rejections": negs.self_pair_rejections,
        "negative_positive_collisions": negs.positive_collisions,
        "negative_duplicate_rejections": negs.duplicate_rejections,
        "unique_drugs": len(drug_smiles(positives)),
        "reference_pairs": len(references),
    }
    bundle = DatasetBundle(tuple(train), tuple(test), tuple(held), tuple(references))
    return PreparedData(bundle, counts)


def save_bundle(directory, bundle: DatasetBundle) -> None:
    d = Path(directory)
    write_pairs(d / "train.csv", bundle.train)
    write_pairs(d / "test.csv", bundle.test)
    write_pairs(d / "asa_holdout.csv", bundle.asa_holdout)
    if bundle.reference_pairs:
        with open(d / "references.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REFERENCE_COLUMNS)
            for r in bundle.reference_pairs:
                w.writerow((r.partner_name, r.drug_id, r.smiles, r.label, r.mechanism))


def load_bundle(directory) -> DatasetBundle:
    d = Path(directory)
    refs = load_reference_pairs(d / "references.csv") if (d / "references.csv").exists() else []
    return DatasetBundle(tuple(load_pairs(d / "train.csv")), tuple(load_pairs(d / "test.csv")),
                         tuple(load_pairs(d / "asa_holdout.csv")), tuple(refs))

"""Synthetic planted-mechanism benchmark.

Each molecule is a carbon/oxygen scaffold carrying zero or more marker
substituents.  A fixed set of unordered marker pairs is "flagged"; a drug pair
interacts when one molecule carries one marker of a flagged pair and the
partner carries the other, and the interaction type is the index of that
flagged pair.  Positives contain exactly one flagged cross-molecule pair,
negatives contain none (they may still carry markers), so the label is only
recoverable by relating the two molecules.

Generation is a pure function of ``(n_pairs, seed)`` via :class:`SplitMix64`.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

from .data import DatasetBundle, PairRecord, SplitSpec, split
from .numerics.rng import SplitMix64

# substituent SMILES fragments, written as branches on a scaffold carbon
MARKERS = ("F", "Cl", "Br", "I", "S", "N", "P")
FLAGGED_PAIRS = (
    ("F", "Cl"), ("F", "S"), ("Cl", "N"), ("Br", "I"),
    ("Br", "P"), ("I", "S"), ("N", "P"), ("S", "S"),
)
N_SYNTHETIC_TYPES = len(FLAGGED_PAIRS)


@dataclass(frozen=True)
class SyntheticSpec:
    n_pairs: int = 2000
    seed: int = 42
    positive_fraction: float = 0.5
    min_scaffold: int = 6
    max_scaffold: int = 18
    max_distractors: int = 1

    def __post_init__(self):
        if self.n_pairs < 2:
            raise ValueError("n_pairs must be >= 2")
        if not 0 < self.positive_fraction < 1:
            raise ValueError("positive_fraction must lie in (0, 1)")
        if not 2 <= self.min_scaffold <= self.max_scaffold:
            raise ValueError("need 2 <= min_scaffold <= max_scaffold")


_FLAG_INDEX = {frozenset(p): t for t, p in enumerate(FLAGGED_PAIRS)}


def flagged_types(markers_a, markers_b) -> set[int]:
    """Types of every flagged pair formed by one marker from each side."""
    return {_FLAG_INDEX[frozenset((x, y))] for x in set(markers_a) for y in set(markers_b)
            if frozenset((x, y)) in _FLAG_INDEX}


def molecule_smiles(rng: SplitMix64, markers, spec: SyntheticSpec) -> str:
    """Chain scaffold with an optional benzene ring and markers as branches."""
    n = spec.min_scaffold + rng.below(spec.max_scaffold - spec.min_scaffold + 1)
    atoms = ["C"] * n
    for i in range(1, n - 1):
        if atoms[i - 1] == "C" and rng.below(5) == 0:
            atoms[i] = "O"
    carbons = [i for i in range(n) if atoms[i] == "C"]
    slots = [carbons[j] for j in rng.permutation(len(carbons))[:len(markers)]]
    branch = {s: m for s, m in zip(slots, markers)}
    parts = []
    for i, a in enumerate(atoms):
        parts.append(a + (f"({branch[i]})" if i in branch else ""))
    ring = "c1ccccc1" if rng.below(2) else ""
    return ring + "".join(parts)


def _draw_markers(rng: SplitMix64, k: int):
    return [MARKERS[rng.below(len(MARKERS))] for _ in range(k)]


def _pair(rng: SplitMix64, positive: bool, spec: SyntheticSpec):
    while True:
        a = _draw_markers(rng, rng.below(spec.max_distractors + 1))
        b = _draw_markers(rng, rng.below(spec.max_distractors + 1))
        if positive:
            t = rng.below(N_SYNTHETIC_TYPES)
            x, y = FLAGGED_PAIRS[t]
            if rng.below(2):
                x, y = y, x
            a.append(x)
            b.append(y)
            if flagged_types(a, b) == {t}:
                return a, b, t
        elif not flagged_types(a, b):
            return a, b, -1


def generate(spec: SyntheticSpec = SyntheticSpec()) -> list[PairRecord]:
    """``spec.n_pairs`` pair records; drug ids are ``SYN<n>`` in order of appearance."""
    rng = SplitMix64(spec.seed)
    n_pos = round(spec.n_pairs * spec.positive_fraction)
    labels = [1] * n_pos + [0] * (spec.n_pairs - n_pos)
    rng.shuffle(labels)
    ids: dict[str, str] = {}

    def drug_id(smiles: str) -> str:
        return ids.setdefault(smiles, f"SYN{len(ids):05d}")

    records = []
    for positive in labels:
        ma, mb, t = _pair(rng, bool(positive), spec)
        sa = molecule_smiles(rng, ma, spec)
        sb = molecule_smiles(rng, mb, spec)
        records.append(PairRecord(drug_id(sa), drug_id(sb), sa, sb, t))
    return records


def synthetic_bundle(spec: SyntheticSpec = SyntheticSpec(), split_spec: SplitSpec = SplitSpec()) -> DatasetBundle:
    train, test = split(generate(spec), split_spec)
    return DatasetBundle(tuple(train), tuple(test), ())


def marker_pairs() -> list[tuple[str, str]]:
    """All unordered marker pairs, flagged or not (for documentation and tests)."""
    return list(combinations(MARKERS, 2)) + [(m, m) for m in MARKERS]

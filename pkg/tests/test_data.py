"""Pair files, negative sampling, ASA holdout and the split."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddi_ablation.data import (
    ASA_ID,
    InvalidTypeCode,
    MissingSmiles,
    PairRecord,
    ParseError,
    SplitSpec,
    extract_asa_holdout,
    load_bundle,
    load_pairs,
    load_reference_pairs,
    prepare_dataset,
    sample_negatives,
    save_bundle,
    split,
    split_sizes,
    write_pairs,
)

HEADER = "drug1_id,drug2_id,smiles1,smiles2,type_code\n"


def positives(n_drugs=12, n_pairs=30, seed=0, with_asa=True):
    rng = np.random.default_rng(seed)
    drugs = [f"DB{i:05d}" for i in range(n_drugs)]
    if with_asa:
        drugs[0] = ASA_ID
    smiles = {d: "C" * (i + 1) for i, d in enumerate(drugs)}
    seen, out = set(), []
    while len(out) < n_pairs:
        a, b = rng.choice(n_drugs, 2, replace=False)
        key = frozenset((drugs[a], drugs[b]))
        if key in seen:
            continue
        seen.add(key)
        out.append(PairRecord(drugs[a], drugs[b], smiles[drugs[a]], smiles[drugs[b]], int(rng.integers(0, 86))))
    return out


def test_load_write_round_trip(tmp_path):
    recs = positives() + [PairRecord("DB1", "DB2", "C", "CC", -1)]
    write_pairs(tmp_path / "p.csv", recs)
    assert load_pairs(tmp_path / "p.csv") == recs


def test_load_errors_carry_line(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text(HEADER + "DB1,DB2,C,CC,3\nDB1,DB3,C,,4\n")
    with pytest.raises(ParseError) as exc:
        load_pairs(p)
    assert exc.value.line == 3 and str(p) in str(exc.value)
    p.write_text(HEADER + "DB1,DB2,C,CC,86\n")
    with pytest.raises(InvalidTypeCode):
        load_pairs(p)
    p.write_text(HEADER + "DB1,DB2,C,CC\n")
    with pytest.raises(ParseError):
        load_pairs(p)
    p.write_text("a,b,c\n")
    with pytest.raises(ParseError):
        load_pairs(p)


def test_record_validation():
    with pytest.raises(InvalidTypeCode):
        PairRecord("a", "b", "C", "C", -2)
    r = PairRecord("a", "b", "C", "C", -1)
    assert r.binary_label == 0 and r.key == frozenset("ab")


def test_reference_file(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("partner_name,drug_id,smiles,label,mechanism\nWarfarin,DB00682,CC,1,PK\n")
    refs = load_reference_pairs(p)
    assert refs[0].label == 1 and refs[0].drug_id == "DB00682"
    p.write_text("partner_name,drug_id,label,mechanism\nWarfarin,DB00682,1,PK\n")
    with pytest.raises(MissingSmiles):
        load_reference_pairs(p)
    p.write_text("partner_name,drug_id,smiles,label,mechanism\nWarfarin,DB00682,,1,PK\n")
    with pytest.raises(MissingSmiles):
        load_reference_pairs(p)


@given(st.integers(10, 20), st.integers(0, 2**32 - 1))
def test_negative_sampling_invariants(n_drugs, seed):
    pos = positives(n_drugs, n_drugs, seed % 1000)
    neg = sample_negatives(pos, seed=seed, exclude=(ASA_ID,))
    known = {r.key for r in pos}
    keys = [r.key for r in neg.records]
    assert len(neg.records) == len(pos)
    assert len(set(keys)) == len(keys)
    assert all(len(k) == 2 for k in keys)
    assert not set(keys) & known
    assert not any(r.involves(ASA_ID) for r in neg.records)
    assert all(r.type_code == -1 for r in neg.records)
    assert neg.records == sample_negatives(pos, seed=seed, exclude=(ASA_ID,)).records


def test_negative_sampling_refuses_when_infeasible():
    pos = positives(6, 6, seed=1)
    with pytest.raises(ValueError, match="admissible"):
        sample_negatives(pos, exclude=(ASA_ID,))


def test_two_drug_example_allows_positive_collision():
    pos = [PairRecord("A", "B", "C", "CC", 1)]
    neg = sample_negatives(pos, seed=42, reject_positives=False)
    assert neg.records[0].key == frozenset("AB")
    with pytest.raises(ValueError):
        sample_negatives(pos, seed=42)


def test_asa_holdout_and_split():
    pos = positives(15, 50)
    prepared = prepare_dataset(pos, SplitSpec(seed=42))
    b, c = prepared.bundle, prepared.counts
    assert all(r.involves(ASA_ID) and r.type_code >= 0 for r in b.asa_holdout)
    assert not any(r.involves(ASA_ID) for r in b.train + b.test)
    assert c["combined"] == 100 and c["asa_pairs"] == len(b.asa_holdout)
    assert len(b.train) + len(b.test) == 100 - c["asa_pairs"]
    assert (len(b.train), len(b.test)) == split_sizes(100 - c["asa_pairs"])
    assert {r.key for r in b.train}.isdisjoint({r.key for r in b.test})
    again = prepare_dataset(pos, SplitSpec(seed=42)).bundle
    assert again == b
    assert prepare_dataset(pos, SplitSpec(seed=7)).bundle.train != b.train


def test_split_sizes_floor():
    assert split_sizes(76_674) == (61_339, 15_335)
    assert split_sizes(10) == (8, 2)
    assert split_sizes(7) == (5, 2)


def test_split_is_seeded_fisher_yates():
    recs = positives(12, 20, with_asa=False)
    train, test = split(recs, SplitSpec(seed=3))
    assert sorted(train + test, key=str) == sorted(recs, key=str)
    assert split(recs, SplitSpec(seed=3)) == (train, test)


def test_extract_asa():
    recs = [PairRecord(ASA_ID, "B", "C", "C", 1), PairRecord("B", "C", "C", "C", 2)]
    held, rest = extract_asa_holdout(recs)
    assert held == recs[:1] and rest == recs[1:]


def test_bundle_round_trip(tmp_path):
    b = prepare_dataset(positives(), SplitSpec()).bundle
    save_bundle(tmp_path, b)
    assert load_bundle(tmp_path) == b

"""SMILES parsing, featurization and the graph cache."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddi_ablation.chemgraph import (
    ATOM_DIM,
    BOND_DIM,
    DEFAULT_SCHEMA,
    ELEMENTS,
    CacheBuildError,
    FeatureSchema,
    MalformedSmiles,
    SmilesError,
    UnsupportedFeature,
    build_cache,
    featurize_atoms,
    featurize_bonds,
    graph_digest,
    load_cache,
    parse_smiles,
    save_cache,
)

from _helpers import isomorphism, random_molecule, write_smiles

ASA = "CC(=O)Oc1ccccc1C(=O)O"

# slot offsets of the documented atom layout
DEG, CHG, ARO, RING, HYD = 17, 23, 28, 29, 30


def _ring_bonds_oracle(g):
    """A bond is in a ring iff removing it keeps its endpoints connected."""
    out = []
    for k, b in enumerate(g.bonds):
        adj = {i: set() for i in range(g.n_atoms)}
        for m, o in enumerate(g.bonds):
            if m != k:
                i, j = o.endpoints
                adj[i].add(j)
                adj[j].add(i)
        seen, stack = {b.endpoints[0]}, [b.endpoints[0]]
        while stack:
            for v in adj[stack.pop()]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        out.append(b.endpoints[1] in seen)
    return out


def test_asa_counts():
    g = parse_smiles(ASA)
    assert g.n_atoms == 13
    assert g.n_bonds == 13
    assert sum(a.is_aromatic for a in g.atoms) == 6
    assert g.smiles_canonical_input == ASA


def test_single_atom():
    g = parse_smiles("C")
    assert g.n_atoms == 1 and g.n_bonds == 0
    assert g.atoms[0].implicit_hydrogens == 4
    assert featurize_bonds(g).shape == (0, BOND_DIM)


def test_benzene():
    g = parse_smiles("c1ccccc1")
    assert g.n_atoms == 6 and g.n_bonds == 6
    assert all(b.order == "aromatic" and b.in_ring for b in g.bonds)
    assert all(a.is_aromatic and a.in_ring and a.implicit_hydrogens == 1 for a in g.atoms)
    x = featurize_atoms(g)
    assert np.all(x[:, ARO] == 1) and np.all(x[:, RING] == 1)


def test_methane_features():
    x = featurize_atoms(parse_smiles("C"))
    assert x.shape == (1, ATOM_DIM)
    assert x[0, ELEMENTS.index("C")] == 1
    assert x[0, DEG] == 1 and x[0, ARO] == 0
    assert x[0, CHG + 2] == 1          # charge 0
    assert x[0, HYD] == 1.0            # 4 H clipped to 3 -> 1.0


def test_ethane_bond_features():
    e = featurize_bonds(parse_smiles("CC"))
    assert e.shape == (2, BOND_DIM)
    assert e[0, 0] == 1 and e[0, 4] == 0
    assert e[0, 6 + 0] == 1            # degree sum 2
    assert np.array_equal(e[0], e[1])


@pytest.mark.parametrize("smiles,charge,h", [
    ("[NH4+]", 1, 4), ("[O-]C", -1, 0), ("C[N+](C)(C)C", 1, 0), ("[Fe+2]", 2, 0),
])
def test_bracket_atoms(smiles, charge, h):
    a = parse_smiles(smiles).atoms[0] if not smiles.startswith("C") else parse_smiles(smiles).atoms[1]
    assert a.formal_charge == charge
    assert a.implicit_hydrogens == h


def test_implicit_hydrogens_from_valence():
    g = parse_smiles("OC(=O)C#N")
    assert [a.implicit_hydrogens for a in g.atoms] == [1, 0, 0, 0, 0]
    s = parse_smiles("CS(=O)(=O)C")         # hypervalent sulfur uses the next valence
    assert s.atoms[1].implicit_hydrogens == 0
    assert parse_smiles("c1ccncc1").atoms[3].implicit_hydrogens == 0
    assert parse_smiles("c1cc[nH]c1").atoms[3].implicit_hydrogens == 1


def test_explicit_hydrogen_atoms_folded():
    g = parse_smiles("[H]OC")
    assert g.n_atoms == 2
    assert g.atoms[0].element == "O" and g.atoms[0].implicit_hydrogens == 1


def test_ring_closure_forms():
    a = parse_smiles("C1CCCCC1")
    b = parse_smiles("C%12CCCCC%12")
    assert isomorphism(a, b) is not None
    g = parse_smiles("C1CC1C2CC2")
    assert g.n_bonds == 7 and sum(b.in_ring for b in g.bonds) == 6


def test_ring_digit_reuse():
    g = parse_smiles("C1CC1C1CC1")
    assert g.n_atoms == 6 and g.n_bonds == 7


def test_bond_endpoints_ordered_and_unique():
    g = parse_smiles("CC(C)(C)c1ccc2ccccc2c1")
    keys = [b.endpoints for b in g.bonds]
    assert all(i < j for i, j in keys)
    assert len(set(keys)) == len(keys)
    degrees = [0] * g.n_atoms
    for i, j in keys:
        degrees[i] += 1
        degrees[j] += 1
    assert degrees == [a.degree for a in g.atoms]


@pytest.mark.parametrize("smiles,pos", [
    ("C[C@H](O)N", 3), ("F/C=C/F", 1), ("[13CH4]", 1), ("C*C", 1), ("CC.O", 2), ("[CH4:1]", 4),
])
def test_unsupported_features(smiles, pos):
    with pytest.raises(UnsupportedFeature) as exc:
        parse_smiles(smiles)
    assert exc.value.position == pos
    assert exc.value.smiles == smiles


@pytest.mark.parametrize("smiles", ["C(", "C)C", "C1CC", "[CH4", "", "C==C", "1CC", "C(C)(", "Xx"])
def test_malformed(smiles):
    with pytest.raises(SmilesError):
        parse_smiles(smiles)


def test_malformed_positions():
    with pytest.raises(MalformedSmiles) as exc:
        parse_smiles("CC(C")
    assert exc.value.position == 2
    with pytest.raises(MalformedSmiles) as exc:
        parse_smiles("C1CC")
    assert exc.value.position == 1


def test_other_element_slot():
    x = featurize_atoms(parse_smiles("[Li]C"))
    assert x[0, DEFAULT_SCHEMA.other_slot] == 1
    assert x[0].sum() > 0
    assert build_cache(["[Li]C", "C"]).other_element_atoms == 1


def test_schema_widths_validated():
    with pytest.raises(ValueError):
        FeatureSchema(element_vocabulary=ELEMENTS[:-1])


@given(st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_rewritten_smiles_isomorphic(n, seed):
    rng = np.random.default_rng(seed)
    elements, bonds = random_molecule(rng, n)
    s1 = write_smiles(elements, bonds, rng, root=0)
    s2 = write_smiles(elements, bonds, rng, root=int(rng.integers(len(elements))))
    g1, g2 = parse_smiles(s1), parse_smiles(s2)
    perm = isomorphism(g1, g2)
    assert perm is not None, (s1, s2)
    x1, x2 = featurize_atoms(g1), featurize_atoms(g2)
    assert np.array_equal(x1, x2[list(perm)])
    assert graph_digest(g1) == graph_digest(parse_smiles(s1))


@given(st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_structural_invariants(n, seed):
    rng = np.random.default_rng(seed)
    elements, bonds = random_molecule(rng, n)
    g = parse_smiles(write_smiles(elements, bonds, rng))
    assert [b.in_ring for b in g.bonds] == _ring_bonds_oracle(g)
    for i, a in enumerate(g.atoms):
        assert a.in_ring == any(b.in_ring and i in b.endpoints for b in g.bonds)
    x, e = featurize_atoms(g), featurize_bonds(g)
    assert x.shape == (g.n_atoms, ATOM_DIM) and e.shape == (2 * g.n_bonds, BOND_DIM)
    for block in ((0, 17), (17, 23), (23, 28)):
        assert np.all(x[:, block[0]:block[1]].sum(axis=1) == 1)
    assert np.all(e[:, :4].sum(axis=1) == 1) and np.all(e[:, 6:].sum(axis=1) == 1)
    assert np.array_equal(e[0::2], e[1::2])
    assert parse_smiles(g.smiles_canonical_input) == g


def test_atom_ring_flag_matches_bonds():
    g = parse_smiles("CC1CC(C)C1CO")
    for i, a in enumerate(g.atoms):
        assert a.in_ring == any(b.in_ring and i in b.endpoints for b in g.bonds)


def test_cache_dedup_and_empty():
    assert len(build_cache(["C", "C"])) == 1
    assert len(build_cache([])) == 0


def test_cache_is_read_only():
    cache = build_cache(["CCO"])
    with pytest.raises(TypeError):
        cache.entries["C"] = cache["CCO"]
    with pytest.raises(ValueError):
        cache["CCO"].atom_features[0, 0] = 5


def test_cache_error_names_smiles():
    with pytest.raises(CacheBuildError) as exc:
        build_cache(["CC", "C[C@H](O)N"])
    assert exc.value.smiles == "C[C@H](O)N"


def test_cache_round_trip_bit_exact(tmp_path):
    smiles = [ASA, "c1ccccc1", "[NH4+]", "C", "[Li]C", "CC(=O)N1CCCC1"]
    cache = build_cache(smiles)
    save_cache(cache, tmp_path / "g.npz")
    loaded = load_cache(tmp_path / "g.npz")
    assert sorted(loaded.keys()) == sorted(cache.keys())
    assert loaded.other_element_atoms == cache.other_element_atoms
    for s in smiles:
        a, b = cache[s], loaded[s]
        assert a.mol == b.mol
        for f in ("atom_features", "bond_features", "src", "dst"):
            x, y = getattr(a, f), getattr(b, f)
            assert x.dtype == y.dtype and x.tobytes() == y.tobytes()

"""SMILES parsing, molecular graphs and fixed-width atom/bond features.

Supported SMILES subset
-----------------------
* organic-subset atoms ``B C N O P S F Cl Br I`` and aromatic ``b c n o p s``
* bracket atoms with element, explicit H count and charge, e.g. ``[nH]``,
  ``[NH4+]``, ``[O-]``, ``[Fe+2]``; a bracketed ``[H]`` bonded to exactly one
  heavy atom is folded into that atom's hydrogen count
* branches ``( )``, bond symbols ``- = # :``, ring closures ``0-9`` and ``%nn``

Rejected with :class:`UnsupportedFeature`: stereo (``/ \\ @``), isotopes,
atom classes, wildcards ``*``, quadruple bonds ``$`` and dot-disconnected
fragments.  Aromaticity is read from lowercase notation as written.

Atom feature layout (31 columns)
--------------------------------
====== ===========================================================
0-16   element one-hot over :data:`ELEMENTS` plus a final "other" slot
17-22  heavy-atom degree one-hot 0..5 (clipped at 5)
23-27  formal charge one-hot -2..+2 (clipped)
28     aromatic flag
29     ring membership flag
30     implicit hydrogen count, clipped to 0..3 and divided by 3
====== ===========================================================

Bond feature layout (12 columns)
--------------------------------
====== ===========================================================
0-3    bond order one-hot: single, double, triple, aromatic
4      ring membership flag
5      ring bond with both endpoints aromatic
6-11   endpoint degree sum one-hot 2..7 (clipped)
====== ===========================================================
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

ELEMENTS: tuple[str, ...] = (
    "C", "N", "O", "S", "F", "Cl", "Br", "I",
    "P", "B", "Si", "Se", "Na", "K", "Ca", "Fe",
)

ATOM_DIM = 31
BOND_DIM = 12

SINGLE, DOUBLE, TRIPLE, AROMATIC = "single", "double", "triple", "aromatic"
BOND_ORDERS: tuple[str, ...] = (SINGLE, DOUBLE, TRIPLE, AROMATIC)
_BOND_SYMBOLS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC}
_ORDER_VALUE = {SINGLE: 1, DOUBLE: 2, TRIPLE: 3, AROMATIC: 1}

_ORGANIC = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
_AROMATIC_ORGANIC = {"b", "c", "n", "o", "p", "s"}
_VALENCES = {
    "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5),
    "S": (2, 4, 6), "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}

_PERIODIC = frozenset("""
H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu
Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba
La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb
Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs
Mt Ds Rg Cn Nh Fl Mc Lv Ts Og
""".split())


class SmilesError(ValueError):
    """Base class for parser errors; ``position`` is a 0-based offset."""

    def __init__(self, message: str, smiles: str, position: int):
        super().__init__(f"{message} at position {position} in {smiles!r}")
        self.smiles = smiles
        self.position = position


class UnsupportedFeature(SmilesError):
    pass


class MalformedSmiles(SmilesError):
    pass


@dataclass(frozen=True)
class AtomRecord:
    element: str
    degree: int
    formal_charge: int
    is_aromatic: bool
    implicit_hydrogens: int
    in_ring: bool


@dataclass(frozen=True)
class BondRecord:
    endpoints: tuple[int, int]
    order: str
    in_ring: bool


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple[AtomRecord, ...]
    bonds: tuple[BondRecord, ...]
    smiles_canonical_input: str

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    def arcs(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed arcs (src, dst); bond k yields arcs 2k (i->j) and 2k+1 (j->i)."""
        src = np.empty(2 * self.n_bonds, dtype=np.int64)
        dst = np.empty(2 * self.n_bonds, dtype=np.int64)
        for k, bond in enumerate(self.bonds):
            i, j = bond.endpoints
            src[2 * k], dst[2 * k] = i, j
            src[2 * k + 1], dst[2 * k + 1] = j, i
        return src, dst


@dataclass(frozen=True)
class FeatureSchema:
    element_vocabulary: tuple[str, ...] = ELEMENTS
    atom_dim: int = ATOM_DIM
    bond_dim: int = BOND_DIM

    def __post_init__(self):
        atom_slots = len(self.element_vocabulary) + 1 + 6 + 5 + 1 + 1 + 1
        if atom_slots != self.atom_dim:
            raise ValueError(f"atom slots sum to {atom_slots}, expected {self.atom_dim}")
        if 4 + 1 + 1 + 6 != self.bond_dim:
            raise ValueError("bond slots must sum to bond_dim")

    @property
    def other_slot(self) -> int:
        return len(self.element_vocabulary)

    def element_slot(self, element: str) -> int:
        try:
            return self.element_vocabulary.index(element)
        except ValueError:
            return self.other_slot

    def slot_map(self) -> dict[str, tuple[int, int]]:
        """Half-open column ranges of every atom feature block."""
        n_el = len(self.element_vocabulary) + 1
        blocks = [("element", n_el), ("degree", 6), ("formal_charge", 5),
                  ("aromatic", 1), ("in_ring", 1), ("implicit_h", 1)]
        out, start = {}, 0
        for name, width in blocks:
            out[name] = (start, start + width)
            start += width
        return out


DEFAULT_SCHEMA = FeatureSchema()


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

@dataclass
class _Atom:
    element: str
    aromatic: bool
    charge: int = 0
    hcount: int | None = None  # None: derive from valence table
    pos: int = 0
    extra_h: int = 0  # folded explicit [H] neighbours


def _parse_bracket(smiles: str, start: int) -> tuple[_Atom, int]:
    end = smiles.find("]", start)
    if end < 0:
        raise MalformedSmiles("unclosed bracket atom", smiles, start)
    body = smiles[start + 1:end]
    i = 0
    if i < len(body) and body[i].isdigit():
        raise UnsupportedFeature("isotope label", smiles, start + 1)
    if i < len(body) and body[i] == "*":
        raise UnsupportedFeature("wildcard atom", smiles, start + 1)
    aromatic = False
    symbol = ""
    if i < len(body) and body[i].isupper():
        symbol = body[i]
        if i + 1 < len(body) and body[i + 1].islower() and body[i:i + 2] in _PERIODIC:
            symbol = body[i:i + 2]
        i += len(symbol)
    elif i < len(body) and body[i] in _AROMATIC_ORGANIC:
        symbol = body[i].upper()
        aromatic = True
        i += 1
    if not symbol or symbol not in _PERIODIC:
        raise MalformedSmiles("bad element in bracket atom", smiles, start + 1)
    if i < len(body) and body[i] == "@":
        raise UnsupportedFeature("chirality", smiles, start + 1 + i)
    hcount = 0
    if i < len(body) and body[i] == "H":
        i += 1
        hcount = 1
        if i < len(body) and body[i].isdigit():
            hcount = int(body[i])
            i += 1
    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        j = i + 1
        if j < len(body) and body[j].isdigit():
            while j < len(body) and body[j].isdigit():
                j += 1
            charge = sign * int(body[i + 1:j])
        else:
            while j < len(body) and body[j] == body[i]:
                j += 1
            charge = sign * (j - i)
        i = j
    if i < len(body) and body[i] == ":":
        raise UnsupportedFeature("atom class", smiles, start + 1 + i)
    if i != len(body):
        raise MalformedSmiles("trailing characters in bracket atom", smiles, start + 1 + i)
    return _Atom(symbol, aromatic, charge, hcount, start), end + 1


def parse_smiles(smiles: str) -> MolGraph:
    """Parse ``smiles`` (see module docstring for the supported subset)."""
    atoms: list[_Atom] = []
    bonds: dict[tuple[int, int], str] = {}
    explicit: set[tuple[int, int]] = set()
    rings: dict[int, tuple[int, str | None, int]] = {}
    stack: list[tuple[int, int]] = []  # (atom, position of "(")
    prev: int | None = None
    pending: str | None = None
    pending_pos = 0
    pos = 0
    n = len(smiles)

    def add_bond(a: int, b: int, symbol: str | None, at: int):
        key = (min(a, b), max(a, b))
        if a == b or key in bonds:
            raise MalformedSmiles("duplicate or self bond", smiles, at)
        if symbol is None:
            order = AROMATIC if atoms[a].aromatic and atoms[b].aromatic else SINGLE
        else:
            order = _BOND_SYMBOLS[symbol]
            explicit.add(key)
        if order == AROMATIC and not (atoms[a].aromatic and atoms[b].aromatic):
            raise MalformedSmiles("aromatic bond between non-aromatic atoms", smiles, at)
        bonds[key] = order

    while pos < n:
        ch = smiles[pos]
        if ch == "[" or ch.isalpha() or ch == "*":
            if ch == "[":
                atom, nxt = _parse_bracket(smiles, pos)
            elif ch == "*":
                raise UnsupportedFeature("wildcard atom", smiles, pos)
            elif smiles[pos:pos + 2] in ("Cl", "Br"):
                atom, nxt = _Atom(smiles[pos:pos + 2], False, pos=pos), pos + 2
            elif ch in _ORGANIC:
                atom, nxt = _Atom(ch, False, pos=pos), pos + 1
            elif ch in _AROMATIC_ORGANIC:
                atom, nxt = _Atom(ch.upper(), True, pos=pos), pos + 1
            else:
                raise MalformedSmiles(f"unexpected atom symbol {ch!r}", smiles, pos)
            atoms.append(atom)
            idx = len(atoms) - 1
            if prev is not None:
                add_bond(prev, idx, pending, pending_pos)
            elif pending is not None:
                raise MalformedSmiles("bond symbol without preceding atom", smiles, pending_pos)
            pending = None
            prev = idx
            pos = nxt
        elif ch in _BOND_SYMBOLS:
            if pending is not None:
                raise MalformedSmiles("consecutive bond symbols", smiles, pos)
            pending, pending_pos = ch, pos
            pos += 1
        elif ch in "/\\":
            raise UnsupportedFeature("directional bond (stereo)", smiles, pos)
        elif ch == "$":
            raise UnsupportedFeature("quadruple bond", smiles, pos)
        elif ch == ".":
            raise UnsupportedFeature("disconnected fragments", smiles, pos)
        elif ch == "(":
            if prev is None:
                raise MalformedSmiles("branch without preceding atom", smiles, pos)
            stack.append((prev, pos))
            pos += 1
        elif ch == ")":
            if not stack:
                raise MalformedSmiles("unbalanced ')'", smiles, pos)
            if pending is not None:
                raise MalformedSmiles("dangling bond symbol", smiles, pending_pos)
            prev = stack.pop()[0]
            pos += 1
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                digits = smiles[pos + 1:pos + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise MalformedSmiles("bad %nn ring closure", smiles, pos)
                label, width = int(digits), 3
            else:
                label, width = int(ch), 1
            if prev is None:
                raise MalformedSmiles("ring closure without atom", smiles, pos)
            if label in rings:
                other, symbol, at = rings.pop(label)
                if symbol is not None and pending is not None and symbol != pending:
                    raise MalformedSmiles("conflicting ring-closure bond symbols", smiles, pos)
                add_bond(other, prev, pending if pending is not None else symbol, pos)
            else:
                rings[label] = (prev, pending, pos)
            pending = None
            pos += width
        else:
            raise MalformedSmiles(f"unexpected character {ch!r}", smiles, pos)

    if not atoms:
        raise MalformedSmiles("empty SMILES", smiles, 0)
    if pending is not None:
        raise MalformedSmiles("dangling bond symbol", smiles, pending_pos)
    if stack:
        raise MalformedSmiles("unbalanced '('", smiles, stack[-1][1])
    if rings:
        label, (_, _, at) = next(iter(rings.items()))
        raise MalformedSmiles(f"unclosed ring bond {label}", smiles, at)

    atoms, bonds = _fold_explicit_hydrogens(smiles, atoms, bonds)
    return _finish(smiles, atoms, bonds)


def _fold_explicit_hydrogens(smiles, atoms, bonds):
    h_atoms = [i for i, a in enumerate(atoms) if a.element == "H"]
    if not h_atoms:
        return atoms, bonds
    for i in h_atoms:
        nbrs = [(k, o) for k, o in bonds.items() if i in k]
        a = atoms[i]
        if len(nbrs) != 1 or nbrs[0][1] != SINGLE or a.charge or a.hcount:
            raise UnsupportedFeature("explicit hydrogen atom", smiles, a.pos)
        (key, _), = nbrs
        partner = key[0] if key[1] == i else key[1]
        if atoms[partner].element == "H":
            raise UnsupportedFeature("explicit hydrogen atom", smiles, a.pos)
        atoms[partner].extra_h += 1
    keep = [i for i in range(len(atoms)) if atoms[i].element != "H"]
    remap = {old: new for new, old in enumerate(keep)}
    new_atoms = [atoms[i] for i in keep]
    new_bonds = {}
    for (a, b), order in bonds.items():
        if a in remap and b in remap:
            new_bonds[(remap[a], remap[b])] = order
    return new_atoms, new_bonds


def _implicit_h(atom: _Atom, bond_orders: list[str]) -> int:
    extra = atom.extra_h
    if atom.hcount is not None:
        return atom.hcount + extra
    valences = _VALENCES.get(atom.element, ())
    total = sum(_ORDER_VALUE[o] for o in bond_orders) + extra
    if atom.aromatic:
        h = valences[0] - total - 1 if valences else 0
    else:
        h = 0
        for v in valences:
            if v >= total:
                h = v - total
                break
    return max(h, 0) + extra


def _bridges(n: int, edges: list[tuple[int, int]]) -> set[tuple[int, int]]:
    """Bridge edges via iterative Tarjan lowlink."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, (a, b) in enumerate(edges):
        adj[a].append((b, k))
        adj[b].append((a, k))
    disc = [-1] * n
    low = [0] * n
    timer = 0
    out: set[tuple[int, int]] = set()
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = timer
        timer += 1
        work = [(root, -1, iter(adj[root]))]
        while work:
            v, parent_edge, it = work[-1]
            advanced = False
            for w, k in it:
                if k == parent_edge:
                    continue
                if disc[w] < 0:
                    disc[w] = low[w] = timer
                    timer += 1
                    work.append((w, k, iter(adj[w])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[w])
            if advanced:
                continue
            work.pop()
            if work:
                u = work[-1][0]
                low[u] = min(low[u], low[v])
                if low[v] > disc[u]:
                    out.add(edges[parent_edge])
    return out


def _finish(smiles: str, atoms: list[_Atom], bonds: dict[tuple[int, int], str]) -> MolGraph:
    keys = sorted(bonds)
    bridges = _bridges(len(atoms), keys)
    ring_bond = {k: k not in bridges for k in keys}
    incident: list[list[str]] = [[] for _ in atoms]
    atom_ring = [False] * len(atoms)
    for k in keys:
        for end in k:
            incident[end].append(bonds[k])
            atom_ring[end] = atom_ring[end] or ring_bond[k]
    atom_records = tuple(
        AtomRecord(
            element=a.element,
            degree=len(incident[i]),
            formal_charge=a.charge,
            is_aromatic=a.aromatic,
            implicit_hydrogens=_implicit_h(a, incident[i]),
            in_ring=atom_ring[i],
        )
        for i, a in enumerate(atoms)
    )
    bond_records = tuple(BondRecord(k, bonds[k], ring_bond[k]) for k in keys)
    return MolGraph(atom_records, bond_records, smiles)


# --------------------------------------------------------------------------
# featurization
# --------------------------------------------------------------------------

def featurize_atoms(g: MolGraph, schema: FeatureSchema = DEFAULT_SCHEMA) -> np.ndarray:
    n_el = len(schema.element_vocabulary) + 1
    x = np.zeros((g.n_atoms, schema.atom_dim), dtype=np.float64)
    for i, atom in enumerate(g.atoms):
        x[i, schema.element_slot(atom.element)] = 1.0
        x[i, n_el + min(atom.degree, 5)] = 1.0
        x[i, n_el + 6 + min(max(atom.formal_charge, -2), 2) + 2] = 1.0
        x[i, n_el + 11] = float(atom.is_aromatic)
        x[i, n_el + 12] = float(atom.in_ring)
        x[i, n_el + 13] = min(atom.implicit_hydrogens, 3) / 3.0
    return x


def featurize_bonds(g: MolGraph, schema: FeatureSchema = DEFAULT_SCHEMA) -> np.ndarray:
    """Bond features in directed-arc order (two identical rows per bond)."""
    e = np.zeros((2 * g.n_bonds, schema.bond_dim), dtype=np.float64)
    for k, bond in enumerate(g.bonds):
        i, j = bond.endpoints
        row = e[2 * k]
        row[BOND_ORDERS.index(bond.order)] = 1.0
        row[4] = float(bond.in_ring)
        row[5] = float(bond.in_ring and g.atoms[i].is_aromatic and g.atoms[j].is_aromatic)
        deg_sum = g.atoms[i].degree + g.atoms[j].degree
        row[6 + min(max(deg_sum, 2), 7) - 2] = 1.0
        e[2 * k + 1] = row
    return e


def count_other_elements(g: MolGraph, schema: FeatureSchema = DEFAULT_SCHEMA) -> int:
    return sum(1 for a in g.atoms if a.element not in schema.element_vocabulary)


# --------------------------------------------------------------------------
# graph cache
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CachedGraph:
    mol: MolGraph
    atom_features: np.ndarray
    bond_features: np.ndarray
    src: np.ndarray
    dst: np.ndarray

    @classmethod
    def from_mol(cls, mol: MolGraph, schema: FeatureSchema = DEFAULT_SCHEMA) -> "CachedGraph":
        src, dst = mol.arcs()
        arrays = [featurize_atoms(mol, schema), featurize_bonds(mol, schema), src, dst]
        for a in arrays:
            a.flags.writeable = False
        return cls(mol, *arrays)


class CacheBuildError(ValueError):
    def __init__(self, smiles: str, cause: SmilesError):
        super().__init__(f"cannot parse {smiles!r}: {cause}")
        self.smiles = smiles
        self.cause = cause


@dataclass(frozen=True)
class GraphCache:
    """Exact-string keyed, read-only mapping SMILES -> featurized graph."""

    entries: Mapping[str, CachedGraph] = field(default_factory=lambda: MappingProxyType({}))
    other_element_atoms: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, smiles: object) -> bool:
        return smiles in self.entries

    def __getitem__(self, smiles: str) -> CachedGraph:
        return self.entries[smiles]

    def keys(self):
        return self.entries.keys()

    def save(self, path) -> None:
        save_cache(self, path)


def build_cache(smiles_set: Iterable[str], schema: FeatureSchema = DEFAULT_SCHEMA) -> GraphCache:
    entries: dict[str, CachedGraph] = {}
    other = 0
    for smi in sorted(set(smiles_set)):
        try:
            mol = parse_smiles(smi)
        except SmilesError as exc:
            raise CacheBuildError(smi, exc) from exc
        entries[smi] = CachedGraph.from_mol(mol, schema)
        other += count_other_elements(mol, schema)
    return GraphCache(MappingProxyType(entries), other)


CACHE_SCHEMA_VERSION = 1


def save_cache(cache: GraphCache, path) -> None:
    """Write the cache as an uncompressed ``.npz`` archive.

    Arrays: ``smiles`` (unicode), ``atom_offsets``/``bond_offsets`` (CSR-style
    row offsets), ``atoms`` (int columns: element index into ``elements``,
    degree, charge, aromatic, hydrogens, in_ring), ``bonds`` (i, j, order
    index, in_ring), and the stacked ``atom_features``/``bond_features``.
    """
    keys = list(cache.keys())
    elements = sorted({a.element for k in keys for a in cache[k].mol.atoms})
    el_index = {e: i for i, e in enumerate(elements)}
    atom_rows, bond_rows, ax, bx = [], [], [], []
    a_off, b_off = [0], [0]
    for k in keys:
        entry = cache[k]
        for a in entry.mol.atoms:
            atom_rows.append((el_index[a.element], a.degree, a.formal_charge,
                              int(a.is_aromatic), a.implicit_hydrogens, int(a.in_ring)))
        for b in entry.mol.bonds:
            bond_rows.append((b.endpoints[0], b.endpoints[1], BOND_ORDERS.index(b.order), int(b.in_ring)))
        ax.append(entry.atom_features)
        bx.append(entry.bond_features)
        a_off.append(a_off[-1] + entry.mol.n_atoms)
        b_off.append(b_off[-1] + entry.mol.n_bonds)
    np.savez(
        path,
        schema_version=np.array(CACHE_SCHEMA_VERSION),
        smiles=np.array(keys, dtype=str),
        elements=np.array(elements, dtype=str),
        atom_offsets=np.array(a_off, dtype=np.int64),
        bond_offsets=np.array(b_off, dtype=np.int64),
        atoms=np.array(atom_rows, dtype=np.int64).reshape(-1, 6),
        bonds=np.array(bond_rows, dtype=np.int64).reshape(-1, 4),
        atom_features=np.concatenate(ax) if ax else np.zeros((0, ATOM_DIM)),
        bond_features=np.concatenate(bx) if bx else np.zeros((0, BOND_DIM)),
        other_element_atoms=np.array(cache.other_element_atoms),
    )


def load_cache(path) -> GraphCache:
    with np.load(path, allow_pickle=False) as z:
        if int(z["schema_version"]) != CACHE_SCHEMA_VERSION:
            raise ValueError(f"unsupported graph cache schema {int(z['schema_version'])}")
        smiles = [str(s) for s in z["smiles"]]
        elements = [str(e) for e in z["elements"]]
        a_off, b_off = z["atom_offsets"], z["bond_offsets"]
        atoms, bonds = z["atoms"], z["bonds"]
        ax, bx = z["atom_features"], z["bond_features"]
        other = int(z["other_element_atoms"])
    entries = {}
    for n, smi in enumerate(smiles):
        a0, a1, b0, b1 = a_off[n], a_off[n + 1], b_off[n], b_off[n + 1]
        mol = MolGraph(
            tuple(AtomRecord(elements[r[0]], int(r[1]), int(r[2]), bool(r[3]), int(r[4]), bool(r[5]))
                  for r in atoms[a0:a1]),
            tuple(BondRecord((int(r[0]), int(r[1])), BOND_ORDERS[r[2]], bool(r[3]))
                  for r in bonds[b0:b1]),
            smi,
        )
        src, dst = mol.arcs()
        arrays = [ax[a0:a1].copy(), bx[2 * b0:2 * b1].copy(), src, dst]
        for a in arrays:
            a.flags.writeable = False
        entries[smi] = CachedGraph(mol, *arrays)
    return GraphCache(MappingProxyType(entries), other)


def graph_digest(g: MolGraph) -> str:
    """Stable content hash of a parsed graph (used for determinism checks)."""
    h = hashlib.sha256()
    h.update(repr((g.atoms, g.bonds)).encode())
    return h.hexdigest()

"""Finite group windows, sofic approximations and their quality diagnostics.

A window is a finite, inverse-closed set of canonical reduced words of a
finitely generated group (a word-metric ball, or a rectangle of two such
balls inside a direct product).  A sofic approximation stores one
permutation of {0..N-1} per generator and extends to arbitrary window
words by composition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

Word = tuple[int, ...]  # signed 1-based generator indices; () is the identity


class BudgetExceededError(RuntimeError):
    """An enumeration or table would exceed the configured budget."""


# ---------------------------------------------------------------------------
# Group kinds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupKind:
    """Tagged description of the ambient group.

    kind is one of "free", "integer_lattice", "cyclic", "finite_table",
    "direct_product".  rank applies to free/integer_lattice, modulus to
    cyclic; finite_table carries a full multiplication table and the ids
    of the chosen generators; direct_product carries the two factors.
    """

    kind: str
    rank: int = 0
    modulus: int = 0
    table: Optional[tuple[tuple[int, ...], ...]] = None
    generator_ids: Optional[tuple[int, ...]] = None
    factors: Optional[tuple["GroupKind", "GroupKind"]] = None

    def n_generators(self) -> int:
        if self.kind in ("free", "integer_lattice"):
            return self.rank
        if self.kind == "cyclic":
            return 1
        if self.kind == "finite_table":
            return len(self.generator_ids or ())
        if self.kind == "direct_product":
            a, b = self.factors
            return a.n_generators() + b.n_generators()
        raise ValueError(f"unsupported group kind: {self.kind}")

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind in ("free", "integer_lattice"):
            out["rank"] = self.rank
        elif self.kind == "cyclic":
            out["modulus"] = self.modulus
        elif self.kind == "finite_table":
            out["table"] = [list(r) for r in self.table]
            out["generator_ids"] = list(self.generator_ids)
        elif self.kind == "direct_product":
            out["factors"] = [f.to_json() for f in self.factors]
        return out

    @staticmethod
    def from_json(d: dict) -> "GroupKind":
        k = d["kind"]
        if k == "free":
            return free_group(d["rank"])
        if k == "integer_lattice":
            return integer_lattice(d["rank"])
        if k == "cyclic":
            return cyclic_group(d["modulus"])
        if k == "finite_table":
            return finite_table_group(
                [tuple(r) for r in d["table"]], tuple(d["generator_ids"])
            )
        if k == "direct_product":
            a, b = (GroupKind.from_json(f) for f in d["factors"])
            return direct_product(a, b)
        raise ValueError(f"unsupported group kind: {k}")


def free_group(rank: int) -> GroupKind:
    return GroupKind("free", rank=rank)


def integer_lattice(rank: int) -> GroupKind:
    return GroupKind("integer_lattice", rank=rank)


def cyclic_group(modulus: int) -> GroupKind:
    if modulus < 1:
        raise ValueError("cyclic modulus must be >= 1")
    return GroupKind("cyclic", modulus=modulus)


def finite_table_group(table: Iterable[tuple[int, ...]],
                       generator_ids: tuple[int, ...]) -> GroupKind:
    tbl = tuple(tuple(r) for r in table)
    m = len(tbl)
    for r in tbl:
        if len(r) != m:
            raise ValueError("multiplication table must be square")
    return GroupKind("finite_table", table=tbl, generator_ids=tuple(generator_ids))


def direct_product(a: GroupKind, b: GroupKind) -> GroupKind:
    return GroupKind("direct_product", factors=(a, b))


# --- internal canonical-element arithmetic per kind ------------------------


class _Ops:
    """Right multiplication by signed generators on canonical element keys."""

    def __init__(self, kind: GroupKind):
        self.kind = kind
        self.ngen = kind.n_generators()
        if kind.kind == "finite_table":
            tbl = np.array(kind.table, dtype=np.int64)
            m = tbl.shape[0]
            # identity: the unique e with e*x = x*e = x for all x
            ident = [i for i in range(m)
                     if all(tbl[i, j] == j and tbl[j, i] == j for j in range(m))]
            if len(ident) != 1:
                raise ValueError("table has no unique identity")
            self._e = int(ident[0])
            inv = np.full(m, -1, dtype=np.int64)
            for i in range(m):
                js = np.nonzero(tbl[i] == self._e)[0]
                if len(js) != 1 or tbl[js[0], i] != self._e:
                    raise ValueError("table row lacks a unique inverse")
                inv[i] = js[0]
            self._tbl = tbl
            self._inv = inv
        elif kind.kind == "direct_product":
            self._left = _Ops(kind.factors[0])
            self._right = _Ops(kind.factors[1])

    def identity(self):
        k = self.kind.kind
        if k == "free":
            return ()
        if k == "integer_lattice":
            return (0,) * self.kind.rank
        if k == "cyclic":
            return 0
        if k == "finite_table":
            return self._e
        if k == "direct_product":
            return (self._left.identity(), self._right.identity())
        raise ValueError(f"unsupported group kind: {k}")

    def act(self, key, letter: int):
        """Right-multiply the element `key` by the signed generator `letter`."""
        k = self.kind.kind
        if k == "free":
            if key and key[-1] == -letter:
                return key[:-1]
            return key + (letter,)
        if k == "integer_lattice":
            i = abs(letter) - 1
            v = list(key)
            v[i] += 1 if letter > 0 else -1
            return tuple(v)
        if k == "cyclic":
            step = 1 if letter > 0 else -1
            return (key + step) % self.kind.modulus
        if k == "finite_table":
            g = self.kind.generator_ids[abs(letter) - 1]
            g = g if letter > 0 else int(self._inv[g])
            return int(self._tbl[key, g])
        if k == "direct_product":
            nl = self._left.ngen
            if abs(letter) <= nl:
                return (self._left.act(key[0], letter), key[1])
            shifted = (abs(letter) - nl) * (1 if letter > 0 else -1)
            return (key[0], self._right.act(key[1], shifted))
        raise ValueError(f"unsupported group kind: {k}")

    def inverse(self, key):
        k = self.kind.kind
        if k == "free":
            return tuple(-x for x in reversed(key))
        if k == "integer_lattice":
            return tuple(-x for x in key)
        if k == "cyclic":
            return (-key) % self.kind.modulus
        if k == "finite_table":
            return int(self._inv[key])
        if k == "direct_product":
            return (self._left.inverse(key[0]), self._right.inverse(key[1]))
        raise ValueError(f"unsupported group kind: {k}")


def _letter_sort_key(letter: int) -> tuple[int, int]:
    return (abs(letter), 0 if letter > 0 else 1)


def _shortlex_key(word: Word) -> tuple:
    return (len(word), tuple(_letter_sort_key(x) for x in word))


# ---------------------------------------------------------------------------
# GroupWindow
# ---------------------------------------------------------------------------


@dataclass
class GroupWindow:
    """A finite inverse-closed set of canonical words with a partial
    multiplication table elements x signed-generators -> element index
    (or -1 for outside the window)."""

    kind: GroupKind
    generators: list[str]
    radius: int
    elements: list[Word]
    mult: np.ndarray          # (|E|, 2*ngen) int64, -1 = outside
    inverse_index: np.ndarray  # (|E|,) int64
    word_index: dict[Word, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.word_index:
            self.word_index = {w: i for i, w in enumerate(self.elements)}

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def identity_index(self) -> int:
        return 0

    def index_of(self, word: Word) -> int:
        return self.word_index[word]

    def word_label(self, i: int) -> str:
        w = self.elements[i]
        if not w:
            return "e"
        parts = []
        for x in w:
            g = self.generators[abs(x) - 1]
            parts.append(g if x > 0 else g + "^-1")
        return ".".join(parts)

    def signed_column(self, letter: int) -> int:
        return 2 * (abs(letter) - 1) + (0 if letter > 0 else 1)

    def validate(self) -> None:
        assert self.elements[0] == (), "identity must be the first element"
        assert len(set(self.elements)) == len(self.elements), "duplicate words"
        for i in range(len(self.elements)):
            j = int(self.inverse_index[i])
            assert int(self.inverse_index[j]) == i, "inverse not involutive"
        ops = _Ops(self.kind)
        # mult consistency against the group arithmetic
        key_of = {}
        for i, w in enumerate(self.elements):
            k = ops.identity()
            for letter in w:
                k = ops.act(k, letter)
            key_of[i] = k
        keys = {v: i for i, v in key_of.items()}
        assert len(keys) == len(self.elements), "canonical words not unique"
        for i in range(len(self.elements)):
            for g in range(1, len(self.generators) + 1):
                for letter in (g, -g):
                    k = ops.act(key_of[i], letter)
                    expect = keys.get(k, -1)
                    got = int(self.mult[i, self.signed_column(letter)])
                    assert got == expect, "mult table inconsistent"


def ball(kind: GroupKind, generators: list[str], radius: int,
         max_elements: int = 10**6) -> GroupWindow:
    """Word-length-<=radius ball of the group, in canonical shortlex form."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if len(generators) != kind.n_generators():
        raise ValueError(
            f"{kind.kind} needs {kind.n_generators()} generators, got {len(generators)}")
    ops = _Ops(kind)
    e = ops.identity()
    # BFS over canonical element keys, recording a shortlex-minimal word per key
    words: dict = {e: ()}
    frontier = [e]
    for _ in range(radius):
        nxt = []
        for key in frontier:
            w = words[key]
            for g in range(1, len(generators) + 1):
                for letter in (g, -g):
                    k2 = ops.act(key, letter)
                    w2 = w + (letter,)
                    if k2 not in words:
                        words[k2] = w2
                        nxt.append(k2)
                        if len(words) > max_elements:
                            raise BudgetExceededError("window too large")
                    elif len(words[k2]) == len(w2) and _shortlex_key(w2) < _shortlex_key(words[k2]):
                        words[k2] = w2
        frontier = nxt
    elements = sorted(words.values(), key=_shortlex_key)
    index = {w: i for i, w in enumerate(elements)}
    key_by_index = {index[w]: k for k, w in words.items()}
    key_index = {k: index[w] for k, w in words.items()}
    ngen = len(generators)
    mult = np.full((len(elements), 2 * ngen), -1, dtype=np.int64)
    for i in range(len(elements)):
        for g in range(1, ngen + 1):
            for letter in (g, -g):
                k2 = ops.act(key_by_index[i], letter)
                col = 2 * (g - 1) + (0 if letter > 0 else 1)
                mult[i, col] = key_index.get(k2, -1)
    inverse_index = np.array(
        [key_index[ops.inverse(key_by_index[i])] for i in range(len(elements))],
        dtype=np.int64,
    )
    return GroupWindow(kind, list(generators), radius, elements, mult, inverse_index)


def product_window(left: GroupWindow, right: GroupWindow) -> GroupWindow:
    """Rectangle E x F inside the direct product, with prefixed labels.

    Element (u, w) becomes the word u followed by w with letters shifted
    past the left factor's generators.
    """
    kind = direct_product(left.kind, right.kind)
    gens = [f"L.{g}" for g in left.generators] + [f"R.{g}" for g in right.generators]
    nl = len(left.generators)
    shift = lambda w: tuple(x + nl if x > 0 else x - nl for x in w)
    elements: list[Word] = []
    for u in left.elements:
        for w in right.elements:
            elements.append(u + shift(w))
    ne, nf = len(left.elements), len(right.elements)
    mult = np.full((ne * nf, 2 * len(gens)), -1, dtype=np.int64)
    for i in range(ne):
        for j in range(nf):
            row = i * nf + j
            for col in range(2 * nl):
                t = int(left.mult[i, col])
                mult[row, col] = -1 if t < 0 else t * nf + j
            for col in range(2 * len(right.generators)):
                t = int(right.mult[j, col])
                mult[row, 2 * nl + col] = -1 if t < 0 else i * nf + t
    inv = np.array(
        [int(left.inverse_index[i]) * nf + int(right.inverse_index[j])
         for i in range(ne) for j in range(nf)],
        dtype=np.int64,
    )
    return GroupWindow(kind, gens, left.radius + right.radius, elements, mult, inv)


# ---------------------------------------------------------------------------
# Sofic approximations
# ---------------------------------------------------------------------------


@dataclass
class SoficApproximation:
    """Per-generator permutations of {0..vertex_count-1}.

    Maps for arbitrary window words are compositions of the generator
    permutations (rightmost letter applied first), which makes free-group
    approximations exactly multiplicative.
    """

    vertex_count: int
    perms: dict[str, np.ndarray]
    label: str = ""
    seed: Optional[int] = None
    note: str = "word maps are generator compositions"

    def __post_init__(self):
        self._inv: dict[str, np.ndarray] = {}
        for g, p in self.perms.items():
            p = np.asarray(p, dtype=np.int64)
            if p.shape != (self.vertex_count,) or len(np.unique(p)) != self.vertex_count:
                raise ValueError(f"perm for {g!r} is not a permutation of the vertex set")
            self.perms[g] = p
            inv = np.empty_like(p)
            inv[p] = np.arange(self.vertex_count, dtype=np.int64)
            self._inv[g] = inv

    def generator_labels(self) -> list[str]:
        return list(self.perms.keys())

    def letter_map(self, letter: int, generators: list[str]) -> np.ndarray:
        g = generators[abs(letter) - 1]
        if g not in self.perms:
            raise KeyError(f"sofic approximation has no generator {g!r}")
        return self.perms[g] if letter > 0 else self._inv[g]

    def word_map(self, word: Word, generators: list[str]) -> np.ndarray:
        """Vertex image array of sigma^word (identity for the empty word)."""
        out = np.arange(self.vertex_count, dtype=np.int64)
        for letter in reversed(word):
            out = self.letter_map(letter, generators)[out]
        return out

    def window_maps(self, window: GroupWindow) -> np.ndarray:
        """(|E|, |V|) array: row i is the image array of window element i."""
        out = np.empty((len(window), self.vertex_count), dtype=np.int64)
        for i, w in enumerate(window.elements):
            out[i] = self.word_map(w, window.generators)
        return out


def cyclic_sofic(n: int, generator: str = "t") -> SoficApproximation:
    """Exact approximation of the integers by the n-cycle v -> v+1 mod n."""
    if n < 1:
        raise ValueError("vertex count must be >= 1")
    perm = (np.arange(n, dtype=np.int64) + 1) % n
    return SoficApproximation(n, {generator: perm}, label=f"cyclic({n})")


def random_sofic(rank: int, n: int, seed: int,
                 generators: Optional[list[str]] = None) -> SoficApproximation:
    """Independent uniform random permutation per free generator."""
    if n < 2:
        raise ValueError("vertex count must be >= 2")
    if generators is None:
        generators = [chr(ord("a") + i) for i in range(rank)]
    if len(generators) != rank:
        raise ValueError("generator label count must equal rank")
    rng = np.random.default_rng(seed)
    perms = {g: rng.permutation(n).astype(np.int64) for g in generators}
    return SoficApproximation(n, perms, label=f"random_free{rank}({n})", seed=seed)


def identity_sofic(n: int) -> SoficApproximation:
    """Approximation of the trivial group: n vertices, no generators."""
    return SoficApproximation(n, {}, label=f"trivial({n})")


def product_sofic(sigma: SoficApproximation, tau: SoficApproximation) -> SoficApproximation:
    """Product approximation on V x W (row-major v*|W|+w).

    Left generators act on the v coordinate, right generators on w; labels
    are prefixed "L."/"R." so the generator set is a disjoint union.
    """
    nv, nw = sigma.vertex_count, tau.vertex_count
    idx = np.arange(nv * nw, dtype=np.int64)
    v, w = idx // nw, idx % nw
    perms: dict[str, np.ndarray] = {}
    for g, p in sigma.perms.items():
        perms[f"L.{g}"] = p[v] * nw + w
    for g, p in tau.perms.items():
        perms[f"R.{g}"] = v * nw + p[w]
    return SoficApproximation(nv * nw, perms,
                              label=f"({sigma.label})x({tau.label})")


# ---------------------------------------------------------------------------
# Defects
# ---------------------------------------------------------------------------


@dataclass
class DefectReport:
    window_radius: int
    homomorphism_defect: float
    freeness_defect: float
    injectivity_defect: float
    n_vertices: int
    n_words: int
    n_relation_pairs: int

    def max_defect(self) -> float:
        return max(self.homomorphism_defect, self.freeness_defect,
                   self.injectivity_defect)


def defect(sigma: SoficApproximation, window: GroupWindow,
           budget: int = 10**9) -> DefectReport:
    """Exhaustive soficity diagnostics of sigma over the window.

    homomorphism: fraction of (vertex, in-window (u,g) pair) where
    sigma^{u.g} != sigma^u o sigma^g;  freeness: fraction of
    (vertex, non-identity word) with sigma^w(v) = v;  injectivity:
    fraction of vertices where w -> sigma^w(v) is non-injective on the
    window.
    """
    n = sigma.vertex_count
    ne = len(window)
    if n * ne > budget:
        raise BudgetExceededError(
            f"defect evaluation needs {n * ne} cells > budget {budget}")
    maps = sigma.window_maps(window)  # (|E|, |V|)
    ident = np.arange(n, dtype=np.int64)

    free_hits = int((maps[1:] == ident).sum()) if ne > 1 else 0
    free_pairs = n * (ne - 1)

    if ne > 1:
        srt = np.sort(maps, axis=0)
        noninj = int((srt[1:] == srt[:-1]).any(axis=0).sum())
    else:
        noninj = 0

    hom_hits = 0
    hom_pairs = 0
    for i in range(ne):
        for g in range(1, len(window.generators) + 1):
            for letter in (g, -g):
                t = int(window.mult[i, window.signed_column(letter)])
                if t < 0:
                    continue
                hom_pairs += 1
                composed = maps[i][sigma.letter_map(letter, window.generators)]
                hom_hits += int((maps[t] != composed).sum())

    return DefectReport(
        window_radius=window.radius,
        homomorphism_defect=hom_hits / (hom_pairs * n) if hom_pairs else 0.0,
        freeness_defect=free_hits / free_pairs if free_pairs else 0.0,
        injectivity_defect=noninj / n,
        n_vertices=n,
        n_words=ne,
        n_relation_pairs=hom_pairs,
    )


# ---------------------------------------------------------------------------
# JSON round trips
# ---------------------------------------------------------------------------


def window_to_json(w: GroupWindow) -> dict:
    return {
        "group_kind": w.kind.to_json(),
        "generators": list(w.generators),
        "radius": w.radius,
    }


def window_from_json(d: dict) -> GroupWindow:
    return ball(GroupKind.from_json(d["group_kind"]), list(d["generators"]),
                int(d["radius"]))


def sofic_to_json(s: SoficApproximation) -> dict:
    return {
        "vertex_count": s.vertex_count,
        "perms": {g: p.tolist() for g, p in s.perms.items()},
        "label": s.label,
        "seed": s.seed,
        "note": s.note,
    }


def sofic_from_json(d: dict) -> SoficApproximation:
    perms = {g: np.array(p, dtype=np.int64) for g, p in d["perms"].items()}
    return SoficApproximation(int(d["vertex_count"]), perms,
                              label=d.get("label", ""), seed=d.get("seed"))


def sofic_dumps(s: SoficApproximation) -> str:
    return json.dumps(sofic_to_json(s), sort_keys=True)


def sofic_loads(text: str) -> SoficApproximation:
    return sofic_from_json(json.loads(text))


def approximation_record(window: GroupWindow, sigma: SoficApproximation) -> dict:
    """Combined record {group_kind, generators, radius, vertex_count,
    perms, seed} binding a window to an approximation."""
    if not set(window.generators) <= set(sigma.perms):
        raise ValueError("approximation lacks the window's generators")
    return {
        "group_kind": window.kind.to_json(),
        "generators": list(window.generators),
        "radius": window.radius,
        "vertex_count": sigma.vertex_count,
        "perms": {g: sigma.perms[g].tolist() for g in window.generators},
        "seed": sigma.seed,
        "note": sigma.note,
    }


def approximation_from_record(d: dict) -> tuple[GroupWindow, SoficApproximation]:
    window = ball(GroupKind.from_json(d["group_kind"]), list(d["generators"]),
                  int(d["radius"]))
    perms = {g: np.array(p, dtype=np.int64) for g, p in d["perms"].items()}
    sigma = SoficApproximation(int(d["vertex_count"]), perms, seed=d.get("seed"))
    return window, sigma

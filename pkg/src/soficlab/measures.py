"""Measure algebra over finite configuration spaces X^V.

Exact mass queries where the expression structure permits (products,
mixtures, conditionings on cell-structured events, uniform-on-set),
seeded sampling everywhere, and exact pushforwards to group windows.
All atom/cell masses are handled in log space; window tables are linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .groups import BudgetExceededError, GroupWindow, SoficApproximation, Word

DENSE_WINDOW_BUDGET = 10**6
REJECTION_BUDGET = 10**6
EXACT_MASS_TOL = 1e-12
WINDOW_MASS_TOL = 1e-9


class RejectionBudgetError(RuntimeError):
    """Rejection sampling exhausted its attempt budget."""


class CapabilityError(RuntimeError):
    """The measure expression does not support the requested exact query."""


# ---------------------------------------------------------------------------
# Alphabet and partitions
# ---------------------------------------------------------------------------


@dataclass
class Alphabet:
    """Ordered finite symbol set with an optional metric (default discrete)."""

    symbols: list[str]
    metric: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.symbols) < 1:
            raise ValueError("alphabet needs at least one symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be distinct")
        if self.metric is not None:
            d = np.asarray(self.metric, dtype=float)
            k = self.size
            if d.shape != (k, k):
                raise ValueError("metric table has wrong shape")
            if not np.allclose(d, d.T) or (d < 0).any() or np.abs(np.diag(d)).max() > 0:
                raise ValueError("metric must be symmetric, nonnegative, zero on diagonal")
            for i in range(k):
                if ((d[i, :, None] + d[None, :, :].reshape(k, k)[:, :]) <
                        d[i, None, :] - 1e-12).any():
                    raise ValueError("metric violates the triangle inequality")
            self.metric = d

    @property
    def size(self) -> int:
        return len(self.symbols)

    def distances(self) -> np.ndarray:
        if self.metric is not None:
            return self.metric
        return 1.0 - np.eye(self.size)


def binary_alphabet() -> Alphabet:
    return Alphabet(["0", "1"])


def pair_alphabet(a: Alphabet) -> Alphabet:
    """Product alphabet X x X; pair (i, j) encodes to i*|X|+j."""
    syms = [f"{x}|{y}" for x in a.symbols for y in a.symbols]
    return Alphabet(syms)


@dataclass
class Partition:
    """Map symbol index -> cell index, surjective onto {0..cell_count-1}."""

    cell_of: np.ndarray
    cell_count: int

    def __post_init__(self):
        self.cell_of = np.asarray(self.cell_of, dtype=np.int64)
        seen = set(self.cell_of.tolist())
        if seen != set(range(self.cell_count)):
            raise ValueError("partition cells must be exactly 0..cell_count-1")

    @staticmethod
    def singletons(alphabet: Alphabet) -> "Partition":
        return Partition(np.arange(alphabet.size), alphabet.size)

    @staticmethod
    def trivial(alphabet: Alphabet) -> "Partition":
        return Partition(np.zeros(alphabet.size, dtype=np.int64), 1)

    def cell_sizes(self) -> np.ndarray:
        return np.bincount(self.cell_of, minlength=self.cell_count)

    def cell_probabilities(self, p: np.ndarray) -> np.ndarray:
        """Per-cell mass q_c = sum of p over symbols in cell c."""
        return np.bincount(self.cell_of, weights=p, minlength=self.cell_count)

    def counts_of(self, x: np.ndarray) -> np.ndarray:
        return np.bincount(self.cell_of[x], minlength=self.cell_count)

    def max_diameter(self, alphabet: Alphabet) -> float:
        d = alphabet.distances()
        worst = 0.0
        for c in range(self.cell_count):
            idx = np.nonzero(self.cell_of == c)[0]
            if len(idx) > 1:
                worst = max(worst, float(d[np.ix_(idx, idx)].max()))
        return worst


# ---------------------------------------------------------------------------
# Events for conditioning
# ---------------------------------------------------------------------------


@dataclass
class CellBandEvent:
    """Union of partition cells whose child mass lies in (e^{-a_hi n}, e^{-a_lo n}].

    The band is the difference of the two "mass above threshold" families,
    hence half-open: strictly above the lower threshold, at or below the
    upper one.
    """

    partition: Partition
    a_lo: float
    a_hi: float

    def __post_init__(self):
        if not self.a_lo < self.a_hi:
            raise ValueError("band needs a_lo < a_hi")

    def contains_log_mass(self, log_mass: float | np.ndarray, n: int):
        return (log_mass > -self.a_hi * n) & (log_mass <= -self.a_lo * n)


@dataclass
class CountVectorEvent:
    """Union of partition cells whose cell-count vector satisfies a predicate."""

    partition: Partition
    predicate: Callable[[np.ndarray], bool]
    description: str = ""

    def contains_counts(self, counts: np.ndarray) -> bool:
        return bool(self.predicate(counts))


@dataclass
class ExplicitEvent:
    """Membership predicate over configurations; exact mass only by enumeration."""

    member: Callable[[np.ndarray], bool]
    description: str = ""


Event = CellBandEvent | CountVectorEvent | ExplicitEvent


# ---------------------------------------------------------------------------
# Measure expressions
# ---------------------------------------------------------------------------


@dataclass
class Capabilities:
    exact_atom_mass: bool
    exact_cell_mass: bool
    exact_sampling: bool


class MeasureExpr:
    """Base class; subclasses are the expression nodes."""

    alphabet: Alphabet
    n_sites: int

    @property
    def capabilities(self) -> Capabilities:
        raise NotImplementedError

    def log_atom_mass(self, x: np.ndarray) -> float:
        raise CapabilityError(f"{type(self).__name__} has no exact atom mass")

    def atom_mass(self, x: np.ndarray) -> float:
        return float(np.exp(self.log_atom_mass(x)))

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        """One configuration (shape (n,)) or a batch (shape (size, n))."""
        raise CapabilityError(f"{type(self).__name__} has no sampler")

    def to_json(self) -> dict:
        raise NotImplementedError


def _as_batch(size: Optional[int]) -> int:
    return 1 if size is None else size


def _squeeze(batch: np.ndarray, size: Optional[int]) -> np.ndarray:
    return batch[0] if size is None else batch


class SparseMeasure(MeasureExpr):
    """Finitely many weighted atoms."""

    def __init__(self, alphabet: Alphabet, configs: np.ndarray, probs: np.ndarray):
        configs = np.asarray(configs, dtype=np.int64)
        if configs.ndim == 1:
            configs = configs[None, :]
        probs = np.asarray(probs, dtype=float)
        if abs(probs.sum() - 1.0) > EXACT_MASS_TOL:
            raise ValueError("sparse atom masses must sum to 1")
        if (probs < 0).any():
            raise ValueError("atom masses must be nonnegative")
        self.alphabet = alphabet
        self.configs = configs
        self.probs = probs
        self.n_sites = configs.shape[1]
        self._index = {tuple(c): i for i, c in enumerate(configs.tolist())}

    @property
    def capabilities(self) -> Capabilities:
        return Capabilities(True, True, True)

    def log_atom_mass(self, x: np.ndarray) -> float:
        i = self._index.get(tuple(np.asarray(x, dtype=np.int64).tolist()))
        if i is None or self.probs[i] == 0.0:
            return -np.inf
        return float(np.log(self.probs[i]))

    def sample(self, rng, size=None):
        m = _as_batch(size)
        cum = np.cumsum(self.probs)
        cum[-1] = 1.0
        idx = np.searchsorted(cum, rng.random(m), side="right")
        return _squeeze(self.configs[idx], size)

    def to_json(self) -> dict:
        return {
            "node": "sparse",
            "symbols": self.alphabet.symbols,
            "configs": self.configs.tolist(),
            "probs": self.probs.tolist(),
        }


class ProductMeasure(MeasureExpr):
    """Independent coordinates; iid when a single distribution is shared."""

    def __init__(self, alphabet: Alphabet, p: np.ndarray, n_sites: Optional[int] = None):
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            if n_sites is None:
                raise ValueError("iid product needs n_sites")
            self.iid = True
            self.n_sites = int(n_sites)
        else:
            self.iid = False
            self.n_sites = p.shape[0]
        sums = p.sum(axis=-1)
        if np.abs(sums - 1.0).max() > EXACT_MASS_TOL:
            raise ValueError("site distributions must sum to 1")
        if (p < 0).any():
            raise ValueError("site distributions must be nonnegative")
        self.alphabet = alphabet
        self.p = p
        with np.errstate(divide="ignore"):
            self.log_p = np.log(p)

    @property
    def capabilities(self) -> Capabilities:
        return Capabilities(True, True, True)

    def site_distribution(self, v: int) -> np.ndarray:
        return self.p if self.iid else self.p[v]

    def log_atom_mass(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.int64)
        if self.iid:
            return float(self.log_p[x].sum())
        return float(self.log_p[np.arange(self.n_sites), x].sum())

    def sample(self, rng, size=None):
        m = _as_batch(size)
        u = rng.random((m, self.n_sites))
        if self.iid:
            cum = np.cumsum(self.p)
            cum[-1] = 1.0
            out = np.searchsorted(cum, u.ravel(), side="right").reshape(m, self.n_sites)
        else:
            cum = np.cumsum(self.p, axis=1)
            cum[:, -1] = 1.0
            out = np.empty((m, self.n_sites), dtype=np.int64)
            for v in range(self.n_sites):
                out[:, v] = np.searchsorted(cum[v], u[:, v], side="right")
        return _squeeze(out.astype(np.int64), size)

    def to_json(self) -> dict:
        return {
            "node": "product",
            "symbols": self.alphabet.symbols,
            "iid": self.iid,
            "p": self.p.tolist(),
            "n_sites": self.n_sites,
        }


class MixtureMeasure(MeasureExpr):
    def __init__(self, weights: Sequence[float], children: Sequence[MeasureExpr]):
        w = np.asarray(weights, dtype=float)
        if (w < 0).any() or abs(w.sum() - 1.0) > EXACT_MASS_TOL:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if len(children) != len(w) or not children:
            raise ValueError("need one child per weight")
        n = children[0].n_sites
        if any(c.n_sites != n for c in children):
            raise ValueError("mixture children must share the site count")
        self.weights = w
        self.children = list(children)
        self.alphabet = children[0].alphabet
        self.n_sites = n
        with np.errstate(divide="ignore"):
            self.log_weights = np.log(w)

    @property
    def capabilities(self) -> Capabilities:
        caps = [c.capabilities for c in self.children]
        return Capabilities(all(c.exact_atom_mass for c in caps),
                            all(c.exact_cell_mass for c in caps),
                            all(c.exact_sampling for c in caps))

    def log_atom_mass(self, x: np.ndarray) -> float:
        terms = [lw + c.log_atom_mass(x)
                 for lw, c in zip(self.log_weights, self.children)]
        return float(logsumexp(terms))

    def sample(self, rng, size=None):
        m = _as_batch(size)
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        which = np.searchsorted(cum, rng.random(m), side="right")
        out = np.empty((m, self.n_sites), dtype=np.int64)
        for j, c in enumerate(self.children):
            idx = np.nonzero(which == j)[0]
            if len(idx):
                out[idx] = c.sample(rng, size=len(idx))
        return _squeeze(out, size)

    def to_json(self) -> dict:
        return {
            "node": "mixture",
            "weights": self.weights.tolist(),
            "children": [c.to_json() for c in self.children],
        }


class UniformOnCells(MeasureExpr):
    """Uniform measure on a union of partition cells of X^V.

    Explicit form: `cells` is an (m, n) array of per-site cell indices.
    Implicit form: `implicit_cell_count` gives the number M of equal-mass
    cells without naming them; only spectrum-based queries apply then.
    """

    def __init__(self, alphabet: Alphabet, partition: Partition, n_sites: int,
                 cells: Optional[np.ndarray] = None,
                 implicit_cell_count: Optional[int] = None):
        if (cells is None) == (implicit_cell_count is None):
            raise ValueError("provide exactly one of cells / implicit_cell_count")
        self.alphabet = alphabet
        self.partition = partition
        self.n_sites = int(n_sites)
        if cells is not None:
            cells = np.asarray(cells, dtype=np.int64)
            if cells.ndim == 1:
                cells = cells[None, :]
            if cells.shape[1] != n_sites:
                raise ValueError("cell rows must have length n_sites")
            if len({tuple(r) for r in cells.tolist()}) != cells.shape[0]:
                raise ValueError("duplicate cells")
            self.cells = cells
            sizes = partition.cell_sizes()
            self.cell_sizes = sizes[cells].prod(axis=1).astype(float)
            self.total_size = float(self.cell_sizes.sum())
            self.implicit_cell_count = None
        else:
            if implicit_cell_count < 1:
                raise ValueError("implicit cell count must be >= 1")
            self.cells = None
            self.implicit_cell_count = int(implicit_cell_count)

    @property
    def capabilities(self) -> Capabilities:
        explicit = self.cells is not None
        return Capabilities(explicit, True, explicit)

    def log_atom_mass(self, x: np.ndarray) -> float:
        if self.cells is None:
            raise CapabilityError("implicit uniform-on-cells has no atom masses")
        cell = self.partition.cell_of[np.asarray(x, dtype=np.int64)]
        key = tuple(cell.tolist())
        if key in {tuple(r) for r in self.cells.tolist()}:
            return -math.log(self.total_size)
        return -np.inf

    def sample(self, rng, size=None):
        if self.cells is None:
            raise CapabilityError("implicit uniform-on-cells has no sampler")
        m = _as_batch(size)
        w = self.cell_sizes / self.total_size
        cum = np.cumsum(w)
        cum[-1] = 1.0
        rows = np.searchsorted(cum, rng.random(m), side="right")
        members = [np.nonzero(self.partition.cell_of == c)[0]
                   for c in range(self.partition.cell_count)]
        out = np.empty((m, self.n_sites), dtype=np.int64)
        u = rng.random((m, self.n_sites))
        for i in range(m):
            for v in range(self.n_sites):
                syms = members[self.cells[rows[i], v]]
                out[i, v] = syms[int(u[i, v] * len(syms))]
        return _squeeze(out, size)

    def to_json(self) -> dict:
        return {
            "node": "uniform_on_cells",
            "symbols": self.alphabet.symbols,
            "cell_of": self.partition.cell_of.tolist(),
            "cell_count": self.partition.cell_count,
            "n_sites": self.n_sites,
            "cells": None if self.cells is None else self.cells.tolist(),
            "implicit_cell_count": self.implicit_cell_count,
        }


def equipartition(alphabet: Alphabet, partition: Partition, n_sites: int,
                  cell_count: int) -> UniformOnCells:
    """M unnamed cells of mass 1/M each (spectrum-only queries)."""
    return UniformOnCells(alphabet, partition, n_sites,
                          implicit_cell_count=cell_count)


class ConditionedMeasure(MeasureExpr):
    """child(. | event), renormalized; event mass must be positive."""

    def __init__(self, child: MeasureExpr, event: Event,
                 rejection_budget: int = REJECTION_BUDGET):
        self.child = child
        self.event = event
        self.alphabet = child.alphabet
        self.n_sites = child.n_sites
        self.rejection_budget = rejection_budget
        self._event_log_mass: Optional[float] = None
        lm = self.event_log_mass(strict=False)
        if lm is not None and lm == -np.inf:
            raise ValueError("conditioning event has zero mass")

    @property
    def capabilities(self) -> Capabilities:
        c = self.child.capabilities
        cellish = isinstance(self.event, (CellBandEvent, CountVectorEvent))
        return Capabilities(c.exact_atom_mass and cellish or isinstance(self.child, SparseMeasure),
                            c.exact_cell_mass and cellish,
                            c.exact_sampling)

    def event_log_mass(self, strict: bool = True) -> Optional[float]:
        if self._event_log_mass is not None:
            return self._event_log_mass
        from . import entropy  # deferred: avoids an import cycle

        ev = self.event
        if isinstance(ev, (CellBandEvent, CountVectorEvent)):
            spec = entropy.cell_spectrum(self.child, ev.partition)
            mask = _event_mask(ev, spec)
            lm = _masked_log_mass(spec, mask)
        elif isinstance(self.child, SparseMeasure):
            total = sum(p for c, p in zip(self.child.configs, self.child.probs)
                        if ev.member(c))
            lm = float(np.log(total)) if total > 0 else -np.inf
        else:
            lm = None
        if lm is None and strict:
            raise CapabilityError("event mass not exactly computable")
        self._event_log_mass = lm
        return lm

    def _member(self, x: np.ndarray) -> bool:
        ev = self.event
        if isinstance(ev, CellBandEvent):
            counts = ev.partition.counts_of(np.asarray(x, dtype=np.int64))
            lm = cell_log_mass(self.child, ev.partition, counts=counts, sites_of=x)
            return bool(ev.contains_log_mass(lm, self.n_sites))
        if isinstance(ev, CountVectorEvent):
            return ev.contains_counts(ev.partition.counts_of(np.asarray(x, dtype=np.int64)))
        return bool(ev.member(np.asarray(x, dtype=np.int64)))

    def log_atom_mass(self, x: np.ndarray) -> float:
        if not self._member(x):
            return -np.inf
        return self.child.log_atom_mass(x) - self.event_log_mass()

    def sample(self, rng, size=None):
        m = _as_batch(size)
        out = np.empty((m, self.n_sites), dtype=np.int64)
        got = 0
        attempts = 0
        batch = max(64, m)
        while got < m:
            if attempts >= self.rejection_budget:
                rest = self._enumeration_sample(rng, m - got)
                if rest is None:
                    raise RejectionBudgetError(
                        f"rejection budget {self.rejection_budget} exhausted "
                        f"after accepting {got}/{m} and the space is too "
                        f"large to enumerate")
                out[got:] = rest
                break
            draw = self.child.sample(rng, size=batch)
            attempts += batch
            for row in draw:
                if self._member(row):
                    out[got] = row
                    got += 1
                    if got == m:
                        break
        return _squeeze(out, size)

    def _enumeration_sample(self, rng, m: int,
                            enumeration_budget: int = 2 ** 20):
        """Exact fallback when rejection stalls: enumerate the event."""
        k = self.alphabet.size
        if k ** self.n_sites > enumeration_budget or \
                not self.child.capabilities.exact_atom_mass:
            return None
        total = k ** self.n_sites
        members, masses = [], []
        for code in range(total):
            x = decode_config(code, k, self.n_sites)
            if self._member(x):
                w = self.child.atom_mass(x)
                if w > 0:
                    members.append(x)
                    masses.append(w)
        if not members:
            raise RejectionBudgetError("conditioning event has no support")
        probs = np.array(masses) / sum(masses)
        cum = np.cumsum(probs)
        cum[-1] = 1.0
        idx = np.searchsorted(cum, rng.random(m), side="right")
        return np.array(members, dtype=np.int64)[idx]

    def to_json(self) -> dict:
        ev = self.event
        if isinstance(ev, CellBandEvent):
            evj = {"event": "cell_band", "a_lo": ev.a_lo, "a_hi": ev.a_hi,
                   "cell_of": ev.partition.cell_of.tolist(),
                   "cell_count": ev.partition.cell_count}
        elif isinstance(ev, CountVectorEvent):
            evj = {"event": "count_vector", "description": ev.description,
                   "cell_of": ev.partition.cell_of.tolist(),
                   "cell_count": ev.partition.cell_count}
        else:
            evj = {"event": "explicit", "description": ev.description}
        return {"node": "conditioned", "child": self.child.to_json(), **evj}


class FibreProduct(MeasureExpr):
    """Independent product of measures over X^V across |W| fibres.

    Global coordinate of (v, w) is v*|W| + w, matching the product sofic
    approximation's row-major vertex indexing; fibre w occupies the slice
    x[w::|W|].
    """

    def __init__(self, children: Sequence[MeasureExpr]):
        if not children:
            raise ValueError("need at least one fibre")
        n = children[0].n_sites
        if any(c.n_sites != n for c in children):
            raise ValueError("fibres must share the site count")
        self.children = list(children)
        self.fibre_count = len(children)
        self.child_sites = n
        self.alphabet = children[0].alphabet
        self.n_sites = n * self.fibre_count

    @property
    def capabilities(self) -> Capabilities:
        caps = [c.capabilities for c in self.children]
        return Capabilities(all(c.exact_atom_mass for c in caps),
                            all(c.exact_cell_mass for c in caps),
                            all(c.exact_sampling for c in caps))

    def fibre_slice(self, x: np.ndarray, w: int) -> np.ndarray:
        return np.asarray(x)[..., w::self.fibre_count]

    def fibre_marginal(self, w: int) -> MeasureExpr:
        return self.children[w]

    def log_atom_mass(self, x: np.ndarray) -> float:
        return float(sum(c.log_atom_mass(self.fibre_slice(x, w))
                         for w, c in enumerate(self.children)))

    def sample(self, rng, size=None):
        m = _as_batch(size)
        out = np.empty((m, self.n_sites), dtype=np.int64)
        for w, c in enumerate(self.children):
            out[:, w::self.fibre_count] = c.sample(rng, size=m)
        return _squeeze(out, size)

    def to_json(self) -> dict:
        return {"node": "fibre_product",
                "children": [c.to_json() for c in self.children]}


def measure_from_json(d: dict) -> MeasureExpr:
    node = d["node"]
    if node == "sparse":
        return SparseMeasure(Alphabet(d["symbols"]), np.array(d["configs"]),
                             np.array(d["probs"]))
    if node == "product":
        return ProductMeasure(Alphabet(d["symbols"]), np.array(d["p"]),
                              n_sites=d["n_sites"] if d["iid"] else None)
    if node == "mixture":
        return MixtureMeasure(d["weights"],
                              [measure_from_json(c) for c in d["children"]])
    if node == "uniform_on_cells":
        part = Partition(np.array(d["cell_of"]), d["cell_count"])
        cells = None if d["cells"] is None else np.array(d["cells"])
        return UniformOnCells(Alphabet(d["symbols"]), part, d["n_sites"],
                              cells=cells,
                              implicit_cell_count=d["implicit_cell_count"])
    if node == "fibre_product":
        return FibreProduct([measure_from_json(c) for c in d["children"]])
    if node == "conditioned":
        child = measure_from_json(d["child"])
        if d["event"] == "cell_band":
            ev = CellBandEvent(Partition(np.array(d["cell_of"]), d["cell_count"]),
                               d["a_lo"], d["a_hi"])
            return ConditionedMeasure(child, ev)
        raise ValueError("only cell-band conditionings round-trip through JSON")
    raise ValueError(f"unknown measure node {node!r}")


# --- shared event helpers (spectrum rows are built in the entropy module) --


def _event_mask(ev: Event, spec) -> np.ndarray:
    if isinstance(ev, CellBandEvent):
        return np.asarray(ev.contains_log_mass(spec.log_mass, spec.n_sites))
    if isinstance(ev, CountVectorEvent):
        if spec.count_vectors is None:
            raise CapabilityError("count-vector event needs a type-class spectrum")
        return np.array([ev.contains_counts(k) for k in spec.count_vectors])
    raise CapabilityError("explicit events are not cell-structured")


def _masked_log_mass(spec, mask: np.ndarray) -> float:
    if not mask.any():
        return -np.inf
    return float(logsumexp(spec.log_mult[mask] + spec.log_mass[mask]))


# ---------------------------------------------------------------------------
# Exact masses of single cells
# ---------------------------------------------------------------------------


def cell_log_mass(mu: MeasureExpr, partition: Partition, *,
                  counts: Optional[np.ndarray] = None,
                  sites: Optional[np.ndarray] = None,
                  sites_of: Optional[np.ndarray] = None) -> float:
    """Log mass of one partition cell of X^V.

    Identify the cell either by its per-site cell indices (`sites`), by a
    configuration inside it (`sites_of`), or -- for iid-structured
    measures only -- by its cell-count vector (`counts`).
    """
    if sites_of is not None and sites is None:
        sites = partition.cell_of[np.asarray(sites_of, dtype=np.int64)]
    if sites is not None:
        sites = np.asarray(sites, dtype=np.int64)
        counts = np.bincount(sites, minlength=partition.cell_count)
    if counts is None:
        raise ValueError("specify the cell by counts, sites, or sites_of")
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != mu.n_sites:
        raise ValueError("cell counts must sum to the site count")

    if isinstance(mu, ProductMeasure):
        if mu.iid:
            q = partition.cell_probabilities(mu.p)
            with np.errstate(divide="ignore"):
                logq = np.log(q)
            mask = counts > 0
            if np.any(np.isneginf(logq[mask])):
                return -np.inf
            return float((counts[mask] * logq[mask]).sum())
        if sites is None:
            raise ValueError("per-site products need the explicit cell (sites)")
        total = 0.0
        for v in range(mu.n_sites):
            q = partition.cell_probabilities(mu.p[v])[sites[v]]
            if q == 0:
                return -np.inf
            total += math.log(q)
        return float(total)
    if isinstance(mu, MixtureMeasure):
        terms = [lw + cell_log_mass(c, partition, counts=counts, sites=sites)
                 for lw, c in zip(mu.log_weights, mu.children)]
        return float(logsumexp(terms))
    if isinstance(mu, SparseMeasure):
        cell_rows = partition.cell_of[mu.configs]
        if sites is not None:
            hit = (cell_rows == sites).all(axis=1)
        else:
            hit = np.array([np.array_equal(
                np.bincount(r, minlength=partition.cell_count), counts)
                for r in cell_rows])
        total = float(mu.probs[hit].sum())
        return math.log(total) if total > 0 else -np.inf
    if isinstance(mu, UniformOnCells):
        if mu.cells is None:
            raise CapabilityError("implicit uniform-on-cells: use its spectrum")
        if not np.array_equal(partition.cell_of, mu.partition.cell_of):
            raise CapabilityError("cell mass only against the defining partition")
        if sites is None:
            raise ValueError("uniform-on-cells needs the explicit cell (sites)")
        for row, size in zip(mu.cells, mu.cell_sizes):
            if np.array_equal(row, sites):
                return math.log(size / mu.total_size)
        return -np.inf
    if isinstance(mu, ConditionedMeasure):
        ev = mu.event
        child_lm = cell_log_mass(mu.child, partition, counts=counts, sites=sites)
        if isinstance(ev, CellBandEvent) and np.array_equal(
                ev.partition.cell_of, partition.cell_of):
            if not ev.contains_log_mass(child_lm, mu.n_sites):
                return -np.inf
            return child_lm - mu.event_log_mass()
        if isinstance(ev, CountVectorEvent) and np.array_equal(
                ev.partition.cell_of, partition.cell_of):
            if not ev.contains_counts(counts):
                return -np.inf
            return child_lm - mu.event_log_mass()
        raise CapabilityError("conditioned cell mass needs a matching cell event")
    raise CapabilityError(f"{type(mu).__name__} has no exact cell mass")


def cell_mass(mu: MeasureExpr, partition: Partition, **kw) -> float:
    return float(np.exp(cell_log_mass(mu, partition, **kw)))


# ---------------------------------------------------------------------------
# Window distributions
# ---------------------------------------------------------------------------


def encode_configs(configs: np.ndarray, alphabet_size: int) -> np.ndarray:
    """Big-endian base-|X| code of configurations (last axis)."""
    configs = np.asarray(configs, dtype=np.int64)
    k = configs.shape[-1]
    powers = alphabet_size ** np.arange(k - 1, -1, -1, dtype=np.int64)
    return configs @ powers


def decode_config(code: int, alphabet_size: int, length: int) -> np.ndarray:
    out = np.empty(length, dtype=np.int64)
    for j in range(length - 1, -1, -1):
        out[j] = code % alphabet_size
        code //= alphabet_size
    return out


@dataclass
class WindowDistribution:
    """Exact finite distribution over X^E in config-code order.

    Dense array table when |X|^|E| fits the budget; a sparse
    {code: mass} dict otherwise (sparse tables support mass queries and
    total variation, not the outer-product operations).
    """

    labels: list[str]
    alphabet_size: int
    table: np.ndarray | dict
    mode: str = "exact"
    sample_count: Optional[int] = None
    counts: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if isinstance(self.table, dict):
            total = sum(self.table.values())
            if abs(total - 1.0) > WINDOW_MASS_TOL:
                raise ValueError("window table must sum to 1")
            if any(v < -1e-15 for v in self.table.values()):
                raise ValueError("window table must be nonnegative")
            return
        self.table = np.asarray(self.table, dtype=float)
        if abs(self.table.sum() - 1.0) > WINDOW_MASS_TOL:
            raise ValueError("window table must sum to 1")
        if (self.table < -1e-15).any():
            raise ValueError("window table must be nonnegative")

    @property
    def is_sparse(self) -> bool:
        return isinstance(self.table, dict)

    @property
    def window_size(self) -> int:
        return len(self.labels)

    def signature(self) -> tuple:
        return (tuple(self.labels), self.alphabet_size)

    def mass_of(self, config: np.ndarray) -> float:
        code = int(encode_configs(np.asarray(config), self.alphabet_size))
        if self.is_sparse:
            return float(self.table.get(code, 0.0))
        return float(self.table[code])

    def _dense(self) -> np.ndarray:
        if self.is_sparse:
            raise CapabilityError("operation needs a dense window table")
        return self.table

    def pair_square(self) -> "WindowDistribution":
        """Distribution of an independent pair, on the product alphabet."""
        k, e = self.alphabet_size, self.window_size
        a = self._dense().reshape((k,) * e)
        outer = np.multiply.outer(a, a)
        perm = [x for j in range(e) for x in (j, e + j)]
        table = outer.transpose(perm).reshape(-1)
        return WindowDistribution(self.labels, k * k, table, mode=self.mode)

    def pair_components(self) -> tuple["WindowDistribution", "WindowDistribution"]:
        """Marginals of a pair-alphabet table onto the two X components."""
        k2, e = self.alphabet_size, self.window_size
        k = int(round(math.sqrt(k2)))
        if k * k != k2:
            raise ValueError("not a pair-alphabet table")
        shaped = self._dense().reshape(tuple(x for _ in range(e) for x in (k, k)))
        first = shaped.sum(axis=tuple(2 * j + 1 for j in range(e))).reshape(-1)
        second = shaped.sum(axis=tuple(2 * j for j in range(e))).reshape(-1)
        return (WindowDistribution(self.labels, k, first, mode=self.mode),
                WindowDistribution(self.labels, k, second, mode=self.mode))

    def to_csv_rows(self, symbols: list[str]) -> list[tuple[str, float]]:
        if self.is_sparse:
            items = sorted(self.table.items())
        else:
            items = [(c, m) for c, m in enumerate(self.table)]
        rows = []
        for code, mass in items:
            if mass > 0:
                cfg = decode_config(code, self.alphabet_size, self.window_size)
                rows.append((".".join(symbols[i] for i in cfg), float(mass)))
        return rows


def tv_distance(a: WindowDistribution, b: WindowDistribution) -> float:
    if a.signature() != b.signature():
        raise ValueError("window mismatch between distributions")
    if a.is_sparse or b.is_sparse:
        da = a.table if a.is_sparse else {c: m for c, m in enumerate(a.table) if m}
        db = b.table if b.is_sparse else {c: m for c, m in enumerate(b.table) if m}
        keys = set(da) | set(db)
        return 0.5 * sum(abs(da.get(k, 0.0) - db.get(k, 0.0)) for k in keys)
    return 0.5 * float(np.abs(a.table - b.table).sum())


def mix_windows(weights: Sequence[float],
                dists: Sequence[WindowDistribution]) -> WindowDistribution:
    sig = dists[0].signature()
    if any(d.signature() != sig for d in dists):
        raise ValueError("window mismatch in mixture")
    table = sum(w * d._dense() for w, d in zip(weights, dists))
    return WindowDistribution(dists[0].labels, dists[0].alphabet_size, table)


def product_window_distribution(p_list: Sequence[np.ndarray],
                                labels: list[str]) -> WindowDistribution:
    """Independent coordinates with per-position distributions."""
    table = np.array([1.0])
    for p in p_list:
        table = np.multiply.outer(table, np.asarray(p, dtype=float)).reshape(-1)
    return WindowDistribution(labels, len(p_list[0]), table)


def iid_window_target(p: np.ndarray, window: GroupWindow) -> WindowDistribution:
    labels = [window.word_label(i) for i in range(len(window))]
    return product_window_distribution([np.asarray(p)] * len(window), labels)


# ---------------------------------------------------------------------------
# Pushforward to a window (the per-vertex marginal)
# ---------------------------------------------------------------------------


def _vertex_targets(sigma: SoficApproximation, v: int, window: GroupWindow) -> np.ndarray:
    out = np.empty(len(window), dtype=np.int64)
    for i, w in enumerate(window.elements):
        t = v
        for letter in reversed(w):
            t = int(sigma.letter_map(letter, window.generators)[t])
        out[i] = t
    return out


def _marginal_from_targets(mu: MeasureExpr, targets: np.ndarray,
                           labels: list[str], dense_budget: int,
                           rng: Optional[np.random.Generator],
                           samples: Optional[int]) -> WindowDistribution:
    k = mu.alphabet.size
    e = len(targets)
    if k ** e > dense_budget:
        raise BudgetExceededError(f"window table {k}^{e} exceeds dense budget")

    distinct, first_pos = np.unique(targets, return_index=True)
    order = np.argsort(first_pos)
    distinct = distinct[order]
    pos_of = {int(t): j for j, t in enumerate(distinct)}
    read = np.array([pos_of[int(t)] for t in targets], dtype=np.int64)
    u = len(distinct)
    # coefficient of distinct coordinate m in the window config code
    coef = np.zeros(u, dtype=np.int64)
    for j, m in enumerate(read):
        coef[m] += k ** (e - 1 - j)

    def scatter(assign_probs: np.ndarray) -> np.ndarray:
        idx = np.arange(k ** u, dtype=np.int64)
        codes = np.zeros_like(idx)
        for m in range(u):
            digit = (idx // (k ** (u - 1 - m))) % k
            codes += digit * coef[m]
        table = np.zeros(k ** e, dtype=float)
        table[codes] = assign_probs
        return table

    if isinstance(mu, ProductMeasure):
        probs = np.array([1.0])
        for t in distinct:
            probs = np.multiply.outer(probs, mu.site_distribution(int(t))).reshape(-1)
        return WindowDistribution(labels, k, scatter(probs))
    if isinstance(mu, MixtureMeasure):
        parts = [_marginal_from_targets(c, targets, labels, dense_budget, rng, samples)
                 for c in mu.children]
        return mix_windows(mu.weights, parts)
    if isinstance(mu, SparseMeasure):
        table = np.zeros(k ** e, dtype=float)
        codes = encode_configs(mu.configs[:, targets], k)
        np.add.at(table, codes, mu.probs)
        return WindowDistribution(labels, k, table)
    if isinstance(mu, UniformOnCells) and mu.cells is not None:
        weights, parts = [], []
        members = [np.nonzero(mu.partition.cell_of == c)[0]
                   for c in range(mu.partition.cell_count)]
        for row, size in zip(mu.cells, mu.cell_sizes):
            site_p = []
            for t in distinct:
                syms = members[row[int(t)]]
                p = np.zeros(k)
                p[syms] = 1.0 / len(syms)
                site_p.append(p)
            probs = np.array([1.0])
            for p in site_p:
                probs = np.multiply.outer(probs, p).reshape(-1)
            parts.append(WindowDistribution(labels, k, scatter(probs)))
            weights.append(size / mu.total_size)
        return mix_windows(weights, parts)
    if isinstance(mu, FibreProduct):
        fibres = targets % mu.fibre_count
        tables = []
        for w in sorted(set(fibres.tolist())):
            sel = np.nonzero(fibres == w)[0]
            sub = _marginal_from_targets(mu.children[w], targets[sel] // mu.fibre_count,
                                         [labels[j] for j in sel], dense_budget,
                                         rng, samples)
            tables.append((sel, sub))
        table = np.zeros(k ** e)
        idx = np.arange(k ** e, dtype=np.int64)
        log_table = np.zeros(k ** e)
        ok = np.ones(k ** e, dtype=bool)
        factor = np.ones(k ** e)
        for sel, sub in tables:
            sub_code = np.zeros_like(idx)
            for rank, j in enumerate(sel):
                digit = (idx // (k ** (e - 1 - j))) % k
                sub_code += digit * (k ** (len(sel) - 1 - rank))
            factor = factor * sub.table[sub_code]
        table = factor
        return WindowDistribution(labels, k, table)
    if isinstance(mu, ConditionedMeasure) and isinstance(
            mu.event, (CellBandEvent, CountVectorEvent)):
        return _exchangeable_conditioned_marginal(mu, distinct, read, coef,
                                                  labels, dense_budget)
    # Monte Carlo fallback
    if rng is None or samples is None:
        raise CapabilityError(
            f"no exact window marginal for {type(mu).__name__}; pass rng and samples")
    draw = mu.sample(rng, size=samples)
    codes = encode_configs(draw[:, targets], k)
    counts = np.bincount(codes, minlength=k ** e)
    return WindowDistribution(labels, k, counts / samples, mode="monte_carlo",
                              sample_count=samples, counts=counts)


def _iid_components(mu: MeasureExpr) -> Optional[list[tuple[float, np.ndarray]]]:
    """Decompose into weighted iid factors, or None."""
    if isinstance(mu, ProductMeasure) and mu.iid:
        return [(1.0, mu.p)]
    if isinstance(mu, MixtureMeasure):
        out = []
        for w, c in zip(mu.weights, mu.children):
            sub = _iid_components(c)
            if sub is None:
                return None
            out.extend((w * sw, sp) for sw, sp in sub)
        return out
    return None


def _exchangeable_conditioned_marginal(mu: ConditionedMeasure, distinct, read,
                                       coef, labels, dense_budget):
    """Exact pushforward of an iid-structured measure conditioned on a
    count-vector-measurable event.  The conditioned measure is
    exchangeable per mixture component, so the marginal at j distinct
    sites is a hypergeometric average over the conditioned type classes.
    """
    from . import entropy  # deferred import

    comps = _iid_components(mu.child)
    if comps is None:
        raise CapabilityError("exchangeable path needs an iid-structured child")
    part = mu.event.partition
    k = mu.alphabet.size
    n = mu.n_sites
    j = len(distinct)
    e = len(read)
    spec = entropy.cell_spectrum(mu.child, part)
    mask = _event_mask(mu.event, spec)
    if not mask.any():
        raise ValueError("conditioning event has zero mass")
    kvecs = spec.count_vectors[mask]
    logmult = spec.log_mult[mask]

    cell_of = part.cell_of
    ncells = part.cell_count
    # per-component conditioned class probabilities
    comp_payload = []
    for (w, p), col in zip(comps, range(len(comps))):
        lm = spec.component_log_mass[mask][:, col]
        log_pi = logmult + lm
        z = logsumexp(log_pi)
        if z == -np.inf:
            comp_payload.append((0.0, None, None))
            continue
        pi = np.exp(log_pi - z)
        weight = w * math.exp(z) / math.exp(mu.event_log_mass())
        q = part.cell_probabilities(p)
        comp_payload.append((weight, pi, (p, q)))

    # enumerate assignments over the distinct sites
    idx = np.arange(k ** j, dtype=np.int64)
    digits = np.empty((j, k ** j), dtype=np.int64)
    for m in range(j):
        digits[m] = (idx // (k ** (j - 1 - m))) % k
    cells_dig = cell_of[digits]
    # profile of each assignment: per-cell multiplicities among the j sites
    profiles = np.zeros((ncells, k ** j), dtype=np.int64)
    for c in range(ncells):
        profiles[c] = (cells_dig == c).sum(axis=0)
    prof_codes = encode_configs(profiles.T, j + 1)
    uniq_codes, inv = np.unique(prof_codes, return_inverse=True)
    uniq_profiles = []
    seen = {}
    for t, code in enumerate(prof_codes):
        if code not in seen:
            seen[code] = profiles[:, t].copy()
    uniq_profiles = [seen[c] for c in uniq_codes]

    denom = np.prod([n - t for t in range(j)], dtype=float)
    table_assign = np.zeros(k ** j)
    for weight, pi, payload in comp_payload:
        if pi is None or weight == 0.0:
            continue
        p, q = payload
        # hypergeometric pattern weight per unique profile
        prof_w = np.empty(len(uniq_profiles))
        for t, prof in enumerate(uniq_profiles):
            ff = np.ones(len(kvecs))
            for c in range(ncells):
                for s in range(int(prof[c])):
                    ff = ff * (kvecs[:, c] - s)
            prof_w[t] = float((pi * ff).sum()) / denom
        with np.errstate(divide="ignore", invalid="ignore"):
            sym_factor = np.ones(k ** j)
            for m in range(j):
                ratio = np.where(q[cell_of] > 0, p / np.where(q[cell_of] > 0, q[cell_of], 1.0), 0.0)
                sym_factor = sym_factor * ratio[digits[m]]
        table_assign += weight * prof_w[inv] * sym_factor

    codes = np.zeros(k ** j, dtype=np.int64)
    for m in range(j):
        codes += digits[m] * coef[m]
    table = np.zeros(k ** e)
    table[codes] = table_assign
    return WindowDistribution(labels, k, table)


def window_marginal(mu: MeasureExpr, sigma: SoficApproximation, v: int,
                    window: GroupWindow, dense_budget: int = DENSE_WINDOW_BUDGET,
                    rng: Optional[np.random.Generator] = None,
                    samples: Optional[int] = None) -> WindowDistribution:
    """Pushforward of mu under x -> (x_{sigma^w(v)})_{w in E}.

    Exact whenever the expression structure allows; Monte Carlo (with the
    mode recorded) otherwise.
    """
    targets = _vertex_targets(sigma, v, window)
    labels = [window.word_label(i) for i in range(len(window))]
    return _marginal_from_targets(mu, targets, labels, dense_budget, rng, samples)


# ---------------------------------------------------------------------------
# Barycentre test
# ---------------------------------------------------------------------------


@dataclass
class BarycentreReport:
    barycentre: WindowDistribution
    product_barycentre: np.ndarray   # mubar x mubar, flat outer table
    mixture_of_squares: np.ndarray   # sum_i w_i (nu_i x nu_i)
    max_deviation: float
    max_cell_variance: float
    is_point_mass_consistent: bool


def barycentre_check(theta: Sequence[tuple[float, WindowDistribution]],
                     tol: float = 1e-9) -> BarycentreReport:
    """Mixture-of-squares versus square-of-barycentre.

    Sum_i w_i (nu_i x nu_i) equals mubar x mubar (entrywise within tol)
    exactly when all atoms nu_i with positive weight coincide.
    """
    weights = np.array([w for w, _ in theta], dtype=float)
    if abs(weights.sum() - 1.0) > 1e-9 or (weights < 0).any():
        raise ValueError("weights must be nonnegative and sum to 1")
    dists = [d for _, d in theta]
    sig = dists[0].signature()
    if any(d.signature() != sig for d in dists):
        raise ValueError("window mismatch between atoms")
    bary = mix_windows(weights, dists)
    sq_mix = sum(w * np.multiply.outer(d._dense(), d._dense())
                 for w, d in zip(weights, dists))
    sq_bary = np.multiply.outer(bary.table, bary.table)
    dev = float(np.abs(sq_mix - sq_bary).max())
    second = sum(w * d.table ** 2 for w, d in zip(weights, dists))
    var = float((second - bary.table ** 2).max())
    return BarycentreReport(bary, sq_bary, sq_mix, dev, var, dev <= tol)

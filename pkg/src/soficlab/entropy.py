"""Shannon entropies, greedy covering numbers, AEP band diagnostics and the
two metric covering bounds, all driven by one exact cell-mass spectrum.

For iid products and mixtures of iid products the spectrum is the method
of types: one row per cell-count vector, carrying an exact log-multinomial
multiplicity and per-component log cell masses.  Sparse and uniform-on-set
measures enumerate their cells directly; conditioned measures filter and
renormalize their child's rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .groups import BudgetExceededError
from .measures import (CapabilityError, CellBandEvent, ConditionedMeasure,
                       CountVectorEvent, FibreProduct, MeasureExpr,
                       MixtureMeasure, Partition, ProductMeasure,
                       SparseMeasure, UniformOnCells, _event_mask,
                       _iid_components)

TYPE_CLASS_BUDGET = 10**7
EPS_GRID_DEFAULT = (0.25, 0.1, 0.05, 0.01)


# ---------------------------------------------------------------------------
# Spectrum / type classes
# ---------------------------------------------------------------------------


@dataclass
class TypeClassTable:
    """Rows of equal-mass cell families, sorted by descending cell mass.

    log_mult is the log number of cells in the row's family; log_mass the
    log mass of each single cell; component_log_mass the per-mixture-
    component cell masses when applicable.  mult_int carries the exact
    integer multiplicities where cheaply available (None entries mean
    "derive from the count vector on demand").
    """

    n_sites: int
    partition: Partition
    log_mult: np.ndarray
    log_mass: np.ndarray
    count_vectors: Optional[np.ndarray] = None
    component_log_mass: Optional[np.ndarray] = None
    component_weights: Optional[np.ndarray] = None
    kind: str = "type_classes"
    mult_int: Optional[list] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.log_mass)

    def total_log_mass(self) -> float:
        return float(logsumexp(self.log_mult + self.log_mass))

    def validate(self, tol: float = 1e-9) -> None:
        assert abs(self.total_log_mass()) <= tol, "spectrum does not sum to 1"
        assert (np.diff(self.log_mass) <= 1e-12).all(), "spectrum not sorted"

    def exact_multiplicity(self, i: int) -> int:
        if self.mult_int is not None and self.mult_int[i] is not None:
            return self.mult_int[i]
        if self.count_vectors is None:
            raise CapabilityError("no exact multiplicity for this row")
        counts = self.count_vectors[i]
        out = 1
        rem = self.n_sites
        for c in counts[:-1]:
            out *= math.comb(rem, int(c))
            rem -= int(c)
        return out

    def restricted(self, mask: np.ndarray) -> "TypeClassTable":
        """Rows in mask, renormalized to a conditional spectrum."""
        if not mask.any():
            raise ValueError("empty restriction")
        lz = float(logsumexp(self.log_mult[mask] + self.log_mass[mask]))
        return TypeClassTable(
            n_sites=self.n_sites,
            partition=self.partition,
            log_mult=self.log_mult[mask],
            log_mass=self.log_mass[mask] - lz,
            count_vectors=None if self.count_vectors is None else self.count_vectors[mask],
            component_log_mass=None if self.component_log_mass is None
            else self.component_log_mass[mask],
            component_weights=self.component_weights,
            kind=self.kind + "|conditioned",
            mult_int=None if self.mult_int is None
            else [m for m, keep in zip(self.mult_int, mask) if keep],
        )


def compositions(n: int, k: int, budget: int = TYPE_CLASS_BUDGET) -> np.ndarray:
    """All count vectors of length k summing to n, lexicographic order."""
    total = math.comb(n + k - 1, k - 1)
    if total > budget:
        raise BudgetExceededError(
            f"{total} count vectors exceed the budget of {budget}")
    if k == 1:
        return np.array([[n]], dtype=np.int64)
    blocks = []
    for i in range(n + 1):
        sub = compositions(n - i, k - 1, budget=budget)
        blocks.append(np.column_stack([np.full(len(sub), i, dtype=np.int64), sub]))
    return np.vstack(blocks)


def _component_log_masses(counts: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row log mass of a single cell under cell probabilities q."""
    with np.errstate(divide="ignore"):
        logq = np.log(q)
    safe = np.where(np.isneginf(logq), 0.0, logq)
    lm = counts @ safe
    dead = np.isneginf(logq)
    if dead.any():
        lm = np.where((counts[:, dead] > 0).any(axis=1), -np.inf, lm)
    return lm


def build_type_classes(mu: MeasureExpr, partition: Partition,
                       budget: int = TYPE_CLASS_BUDGET) -> TypeClassTable:
    """Exhaustive method-of-types table for an iid-structured measure."""
    comps = _iid_components(mu)
    if comps is None:
        raise CapabilityError("type classes need an iid product or a mixture of them")
    n = mu.n_sites
    counts = compositions(n, partition.cell_count, budget=budget)
    log_mult = gammaln(n + 1) - gammaln(counts + 1).sum(axis=1)
    weights = np.array([w for w, _ in comps])
    comp_lm = np.column_stack([
        _component_log_masses(counts, partition.cell_probabilities(p))
        for _, p in comps])
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    combined = logsumexp(comp_lm + log_w[None, :], axis=1)
    keep = ~np.isneginf(combined)
    counts, log_mult = counts[keep], log_mult[keep]
    comp_lm, combined = comp_lm[keep], combined[keep]
    order = np.lexsort(tuple(counts[:, c] for c in range(counts.shape[1] - 1, -1, -1))
                       + (-combined,))
    return TypeClassTable(
        n_sites=n, partition=partition,
        log_mult=log_mult[order], log_mass=combined[order],
        count_vectors=counts[order], component_log_mass=comp_lm[order],
        component_weights=weights,
    )


def cell_spectrum(mu: MeasureExpr, partition: Partition,
                  budget: int = TYPE_CLASS_BUDGET) -> TypeClassTable:
    """Exact cell-mass spectrum of mu for the product partition P^V."""
    if _iid_components(mu) is not None:
        return build_type_classes(mu, partition, budget=budget)
    if isinstance(mu, SparseMeasure):
        cell_rows = partition.cell_of[mu.configs]
        keys: dict[bytes, float] = {}
        rows: dict[bytes, np.ndarray] = {}
        for r, p in zip(cell_rows, mu.probs):
            b = r.tobytes()
            keys[b] = keys.get(b, 0.0) + float(p)
            rows[b] = r
        items = [(rows[b], m) for b, m in keys.items() if m > 0]
        counts = np.array([np.bincount(r, minlength=partition.cell_count)
                           for r, _ in items], dtype=np.int64)
        log_mass = np.log(np.array([m for _, m in items]))
        order = np.argsort(-log_mass, kind="stable")
        return TypeClassTable(
            n_sites=mu.n_sites, partition=partition,
            log_mult=np.zeros(len(items)), log_mass=log_mass[order],
            count_vectors=counts[order], kind="sparse_cells",
            mult_int=[1] * len(items),
        )
    if isinstance(mu, UniformOnCells):
        if not np.array_equal(partition.cell_of, mu.partition.cell_of):
            raise CapabilityError("uniform-on-cells spectrum needs its own partition")
        if mu.cells is None:
            m = mu.implicit_cell_count
            return TypeClassTable(
                n_sites=mu.n_sites, partition=partition,
                log_mult=np.array([math.log(m)]),
                log_mass=np.array([-math.log(m)]),
                kind="equipartition", mult_int=[m],
            )
        counts = np.array([np.bincount(r, minlength=partition.cell_count)
                           for r in mu.cells], dtype=np.int64)
        log_mass = np.log(mu.cell_sizes / mu.total_size)
        order = np.argsort(-log_mass, kind="stable")
        return TypeClassTable(
            n_sites=mu.n_sites, partition=partition,
            log_mult=np.zeros(len(mu.cells)), log_mass=log_mass[order],
            count_vectors=counts[order], kind="uniform_cells",
            mult_int=[1] * len(mu.cells),
        )
    if isinstance(mu, ConditionedMeasure):
        ev = mu.event
        if not isinstance(ev, (CellBandEvent, CountVectorEvent)):
            raise CapabilityError("spectrum of an explicit-event conditioning")
        if not np.array_equal(ev.partition.cell_of, partition.cell_of):
            raise CapabilityError("conditioned spectrum needs the event's partition")
        child = cell_spectrum(mu.child, partition, budget=budget)
        return child.restricted(_event_mask(ev, child))
    if isinstance(mu, FibreProduct):
        spec = cell_spectrum(mu.children[0], partition, budget=budget)
        for child in mu.children[1:]:
            other = cell_spectrum(child, partition, budget=budget)
            if len(spec) * len(other) > budget:
                raise BudgetExceededError("fibre-product spectrum exceeds budget")
            lm = (spec.log_mult[:, None] + other.log_mult[None, :]).ravel()
            lmass = (spec.log_mass[:, None] + other.log_mass[None, :]).ravel()
            order = np.argsort(-lmass, kind="stable")
            spec = TypeClassTable(
                n_sites=spec.n_sites + other.n_sites, partition=partition,
                log_mult=lm[order], log_mass=lmass[order], kind="fibre_product")
        return spec
    raise CapabilityError(f"no exact spectrum for {type(mu).__name__}")


# ---------------------------------------------------------------------------
# Shannon entropy
# ---------------------------------------------------------------------------


@dataclass
class EntropyReport:
    h_nats: float
    n_sites: int
    cell_count: int
    method: str
    component_h: Optional[list[float]] = None
    sample_count: Optional[int] = None

    @property
    def normalized(self) -> float:
        return self.h_nats / self.n_sites

    @property
    def h_bits(self) -> float:
        return self.h_nats / math.log(2)


def _spectrum_entropy(spec: TypeClassTable) -> float:
    t = spec.log_mult + spec.log_mass  # log of each row's total mass
    finite = ~np.isneginf(t)
    return float(-(np.exp(t[finite]) * spec.log_mass[finite]).sum())


def shannon_entropy(mu: MeasureExpr | TypeClassTable, partition: Optional[Partition] = None,
                    budget: int = TYPE_CLASS_BUDGET,
                    samples: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> EntropyReport:
    """H of the P^V cell masses, exact via the spectrum when possible.

    If no exact spectrum exists and samples/rng are given, falls back to
    a plug-in estimate over sampled cell identities.
    """
    if isinstance(mu, TypeClassTable):
        spec = mu
        h = _spectrum_entropy(spec)
        return EntropyReport(h, spec.n_sites, spec.partition.cell_count,
                             method=spec.kind)
    try:
        spec = cell_spectrum(mu, partition, budget=budget)
    except CapabilityError:
        if samples is None or rng is None:
            raise
        draw = mu.sample(rng, size=samples)
        cells = partition.cell_of[draw]
        _, freq = np.unique(cells, axis=0, return_counts=True)
        p = freq / samples
        h = float(-(p * np.log(p)).sum())
        return EntropyReport(h, mu.n_sites, partition.cell_count,
                             method="sampled", sample_count=samples)
    h = _spectrum_entropy(spec)
    comp_h = None
    if spec.component_log_mass is not None and spec.component_log_mass.shape[1] > 1:
        comp_h = []
        for j in range(spec.component_log_mass.shape[1]):
            t = spec.log_mult + spec.component_log_mass[:, j]
            finite = ~np.isneginf(t)
            comp_h.append(float(-(np.exp(t[finite])
                                  * spec.component_log_mass[finite, j]).sum()))
    hi = mu.n_sites * math.log(max(partition.cell_count, 1)) if partition else np.inf
    if not (-1e-9 <= h <= hi + max(1e-9, 1e-12 * abs(hi))):
        raise AssertionError(f"entropy {h} outside [0, n log |P|]")
    return EntropyReport(h, mu.n_sites, partition.cell_count if partition else 0,
                         method=spec.kind, component_h=comp_h)


# ---------------------------------------------------------------------------
# Covering numbers
# ---------------------------------------------------------------------------


@dataclass
class CoveringReport:
    eps: float
    log_count: float
    achieved_mass: float
    classes_used: int
    count: Optional[int] = None  # exact integer when representable

    @property
    def count_float(self) -> float:
        return math.exp(self.log_count)


def covering_number(mu: MeasureExpr | TypeClassTable, partition: Optional[Partition],
                    eps: float, budget: int = TYPE_CLASS_BUDGET) -> CoveringReport:
    """Minimal number of cells of P^V whose union has mass strictly above
    1 - eps, taking cells in order of decreasing mass and splitting the
    boundary family exactly."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    spec = mu if isinstance(mu, TypeClassTable) else cell_spectrum(mu, partition, budget=budget)
    target = 1.0 - eps
    cls_mass = np.exp(spec.log_mult + spec.log_mass)
    cum = np.cumsum(cls_mass)
    # first row whose inclusion pushes the running mass above target
    i = int(np.searchsorted(cum, target, side="right"))
    if i >= len(cls_mass):
        i = len(cls_mass) - 1  # float shortfall; the last family must close it
    prev = float(cum[i - 1]) if i > 0 else 0.0
    need = target - prev
    log_m = float(spec.log_mass[i])
    m = math.exp(log_m)
    if need <= 0:
        taken = 1
        log_taken = 0.0
    elif m > 0:
        # smallest j with j*m strictly above need; ratios within float
        # noise of an integer sit exactly on the boundary, so they still
        # require one more cell
        ratio = need / m
        taken = int(math.floor(ratio * (1 + 1e-12) + 1e-15)) + 1
        log_taken = math.log(taken)
    else:
        log_taken = math.log(need) - log_m
        taken = None
    whole_log = logsumexp(spec.log_mult[:i]) if i > 0 else -np.inf
    log_count = float(logsumexp([whole_log, log_taken if taken is None
                                 else math.log(taken)]))
    count: Optional[int] = None
    if taken is not None and i <= 200_000:
        try:
            count = sum(spec.exact_multiplicity(j) for j in range(i)) + taken
        except CapabilityError:
            count = None
    achieved = prev + (taken * m if taken is not None else need)
    return CoveringReport(eps=eps, log_count=log_count,
                          achieved_mass=float(achieved),
                          classes_used=i + 1, count=count)


# ---------------------------------------------------------------------------
# AEP diagnostics
# ---------------------------------------------------------------------------


@dataclass
class AEPReport:
    h: float
    eps_list: list[float]
    band_masses: list[float]
    n_sites: int
    strong_flags: list[bool]

    @property
    def strong(self) -> bool:
        return all(self.strong_flags)


def aep_check(mu: MeasureExpr | TypeClassTable, partition: Optional[Partition],
              h: float, eps_list: Sequence[float] = EPS_GRID_DEFAULT,
              budget: int = TYPE_CLASS_BUDGET) -> AEPReport:
    """Mass of the cells whose mass lies strictly inside
    (e^{-(h+eps) n}, e^{-(h-eps) n}), per eps."""
    spec = mu if isinstance(mu, TypeClassTable) else cell_spectrum(mu, partition, budget=budget)
    n = spec.n_sites
    eps_sorted = sorted(eps_list)
    masses, flags = [], []
    for eps in eps_sorted:
        mask = (spec.log_mass > -(h + eps) * n) & (spec.log_mass < -(h - eps) * n)
        if mask.any():
            mass = float(np.exp(logsumexp(spec.log_mult[mask] + spec.log_mass[mask])))
        else:
            mass = 0.0
        masses.append(mass)
        flags.append(mass >= 1.0 - 1e-12)
    return AEPReport(h=h, eps_list=eps_sorted, band_masses=masses,
                     n_sites=n, strong_flags=flags)


# ---------------------------------------------------------------------------
# Rate estimation
# ---------------------------------------------------------------------------


@dataclass
class RateReport:
    slope: float
    intercept: float
    residuals: list[float]  # per point, normalized by n


def rate_estimate(series: Sequence[tuple[int, float]]) -> RateReport:
    """Least-squares slope of y = h*n + c through the given (n, y) points."""
    if len(series) < 2:
        raise ValueError("need at least two points")
    n = np.array([s[0] for s in series], dtype=float)
    y = np.array([s[1] for s in series], dtype=float)
    slope, intercept = np.polyfit(n, y, 1)
    resid = (y - (slope * n + intercept)) / n
    return RateReport(float(slope), float(intercept), resid.tolist())


# ---------------------------------------------------------------------------
# Metric covering bounds
# ---------------------------------------------------------------------------


def binary_entropy_nats(a: float) -> float:
    if a <= 0.0 or a >= 1.0:
        return 0.0
    return float(-a * math.log(a) - (1 - a) * math.log(1 - a))


@dataclass
class HammingBallCount:
    n: int
    radius: int
    cells: int
    count: int

    @property
    def log_count(self) -> float:
        return math.log(self.count)


def hamming_ball_count(n: int, radius: int, cells: int) -> HammingBallCount:
    """Exact number of cell strings within Hamming distance <= radius."""
    if not 0 <= radius <= n:
        raise ValueError("radius must lie in [0, n]")
    count = sum(math.comb(n, j) * (cells - 1) ** j for j in range(radius + 1))
    return HammingBallCount(n, radius, cells, count)


def hamming_ball_growth_bound(n: int, alpha: float, cells: int) -> float:
    """Log of the exponential ball bound 2^{H2(alpha) n} |P|^{alpha n}."""
    return n * binary_entropy_nats(alpha) + alpha * n * math.log(cells)


@dataclass
class MetricCovBounds:
    delta: float
    eps: float
    upper_log: float  # bounds the delta-ball covering at mass level 1-eps
    lower_log: float  # bounds the (delta/2)-ball covering at mass level 1-eps
    cov_eps_log: float
    cov_2eps_log: float
    ball_bound_log: float


def metric_cov_bounds(mu: MeasureExpr, alphabet, delta: float, eps: float,
                      p_fine: Partition,
                      budget: int = TYPE_CLASS_BUDGET) -> MetricCovBounds:
    """Two-sided bounds on covering numbers of mu under the Hamming
    average of the alphabet metric, using a partition whose cells all
    have diameter below delta.

    Upper: covering by delta-balls needs at most cov_eps(mu; P^V) balls.
    Lower: covering by (delta/2)-balls needs at least
    cov_{2eps}(mu; P^V) / (Hamming ball bound with radius fraction 3 eps).
    """
    diam = p_fine.max_diameter(alphabet)
    if diam >= delta:
        raise ValueError(f"cell diameter {diam} is not below delta={delta}")
    if not 0 < eps < 1 / 6:
        raise ValueError("the lower bound's regime needs eps in (0, 1/6)")
    n = mu.n_sites
    cov1 = covering_number(mu, p_fine, eps, budget=budget)
    cov2 = covering_number(mu, p_fine, 2 * eps, budget=budget)
    ball = hamming_ball_growth_bound(n, 3 * eps, p_fine.cell_count)
    lower = max(0.0, cov2.log_count - ball)
    return MetricCovBounds(delta=delta, eps=eps, upper_log=cov1.log_count,
                           lower_log=lower, cov_eps_log=cov1.log_count,
                           cov_2eps_log=cov2.log_count, ball_bound_log=ball)


# ---------------------------------------------------------------------------
# Entropy vs covering inequality (asserted on every computed instance)
# ---------------------------------------------------------------------------


@dataclass
class EntropyCoveringGap:
    h_nats: float
    log_cov: float
    eps: float
    n_sites: int
    cell_count: int

    @property
    def rhs(self) -> float:
        return math.log(2) + self.log_cov + self.eps * self.n_sites * math.log(self.cell_count)

    @property
    def slack(self) -> float:
        return self.rhs - self.h_nats

    @property
    def holds(self) -> bool:
        return self.h_nats <= self.rhs + 1e-9


def entropy_covering_gap(mu: MeasureExpr | TypeClassTable,
                         partition: Optional[Partition], eps: float,
                         budget: int = TYPE_CLASS_BUDGET) -> EntropyCoveringGap:
    """H <= log 2 + log cov_eps + eps n log |P|, evaluated exactly."""
    spec = mu if isinstance(mu, TypeClassTable) else cell_spectrum(mu, partition, budget=budget)
    h = _spectrum_entropy(spec)
    cov = covering_number(spec, None, eps)
    return EntropyCoveringGap(h_nats=h, log_cov=cov.log_count, eps=eps,
                              n_sites=spec.n_sites,
                              cell_count=spec.partition.cell_count)

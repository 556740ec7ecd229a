"""Pullback names, empirical distributions, good-model sets, and the
local weak*, locally-empirical and doubly-empirical convergence
statistics, exact on enumerable models and Monte Carlo at scale.

All weak* neighbourhoods are parametrized as (window E, total-variation
tolerance t): a measure is inside the neighbourhood when its E-marginal
is within t of the target's in total variation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .groups import BudgetExceededError, GroupWindow, SoficApproximation
from .measures import (CellBandEvent, ConditionedMeasure, CountVectorEvent,
                       MeasureExpr, WindowDistribution, _iid_components,
                       _marginal_from_targets, encode_configs, decode_config,
                       tv_distance, window_marginal)

Z99 = 2.5758293035489004  # two-sided 99% normal quantile

MC_BATCH = 2048


@dataclass
class Neighbourhood:
    """TV ball of radius tol around a target window marginal.

    Carries the group window that produced the target so the statistics
    can rebuild pushforwards.
    """

    target: WindowDistribution
    tol: float
    window: Optional[GroupWindow] = None

    def __post_init__(self):
        if not 0 < self.tol <= 1:
            raise ValueError("tolerance must lie in (0, 1]")

    def contains(self, dist: WindowDistribution) -> bool:
        return tv_distance(dist, self.target) <= self.tol


@dataclass
class MassEstimate:
    estimate: float
    ci_low: float
    ci_high: float
    mode: str  # "exact" | "monte_carlo"
    sample_count: Optional[int] = None
    hits: Optional[int] = None

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2


def wilson_interval(hits: int, n: int, z: float = Z99) -> tuple[float, float]:
    """99% Wilson score interval; well behaved at the extremes."""
    if n == 0:
        return (0.0, 1.0)
    phat = hits / n
    denom = 1 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    hw = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, center - hw), min(1.0, center + hw))


def exact_estimate(mass: float) -> MassEstimate:
    return MassEstimate(mass, mass, mass, mode="exact")


def mc_estimate(hits: int, n: int) -> MassEstimate:
    lo, hi = wilson_interval(hits, n)
    return MassEstimate(hits / n, lo, hi, mode="monte_carlo",
                        sample_count=n, hits=hits)


# ---------------------------------------------------------------------------
# Pullback names and empirical distributions
# ---------------------------------------------------------------------------


def vertex_image_matrix(sigma: SoficApproximation, window: GroupWindow) -> np.ndarray:
    """(|V|, |E|) matrix of sigma^w(v) images."""
    return sigma.window_maps(window).T


def pullback_name(sigma: SoficApproximation, x: np.ndarray, v: int,
                  window: GroupWindow) -> np.ndarray:
    """The configuration (x_{sigma^w(v)})_{w in E} in window element order."""
    x = np.asarray(x, dtype=np.int64)
    out = np.empty(len(window), dtype=np.int64)
    for i, w in enumerate(window.elements):
        t = v
        for letter in reversed(w):
            t = int(sigma.letter_map(letter, window.generators)[t])
        out[i] = x[t]
    return out


def empirical_distribution(sigma: SoficApproximation, x: np.ndarray,
                           window: GroupWindow,
                           alphabet_size: Optional[int] = None,
                           dense_budget: int = 10**6) -> WindowDistribution:
    """Average of the pullback-name point masses over all vertices.

    Dense table below the budget; a sparse {code: mass} table for big
    windows (the support has at most |V| entries either way).
    """
    x = np.asarray(x, dtype=np.int64)
    k = alphabet_size if alphabet_size is not None else int(x.max()) + 1
    labels = [window.word_label(i) for i in range(len(window))]
    names = x[vertex_image_matrix(sigma, window)]  # (|V|, |E|)
    codes = encode_configs(names, k)
    nv = sigma.vertex_count
    if k ** len(window) > dense_budget:
        uniq, freq = np.unique(codes, return_counts=True)
        table = {int(c): f / nv for c, f in zip(uniq, freq)}
        return WindowDistribution(labels, k, table)
    counts = np.bincount(codes, minlength=k ** len(window))
    return WindowDistribution(labels, k, counts / nv, counts=counts)


def _batch_codes(x_batch: np.ndarray, images: np.ndarray, k: int) -> np.ndarray:
    """(S, |V|) window-config codes of a batch of configurations."""
    names = x_batch[:, images]  # (S, |V|, |E|)
    e = images.shape[1]
    powers = k ** np.arange(e - 1, -1, -1, dtype=np.int64)
    return names @ powers


def _batch_tv(x_batch: np.ndarray, images: np.ndarray, k: int,
              target: np.ndarray) -> np.ndarray:
    """Per-sample TV between the empirical window distribution and target."""
    s, nv = x_batch.shape[0], images.shape[0]
    d = len(target)
    out = np.empty(s)
    for start in range(0, s, MC_BATCH):
        chunk = x_batch[start:start + MC_BATCH]
        codes = _batch_codes(chunk, images, k)
        m = chunk.shape[0]
        flat = (np.arange(m)[:, None] * d + codes).ravel()
        counts = np.bincount(flat, minlength=m * d).reshape(m, d)
        out[start:start + m] = 0.5 * np.abs(counts / nv - target[None, :]).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# Good-model sets
# ---------------------------------------------------------------------------


@dataclass
class GoodModelSet:
    exact: bool
    window_labels: list[str]
    tol: float
    members: Optional[np.ndarray] = None   # (m, |V|) when exact
    member_mask: Optional[np.ndarray] = None  # over all config codes when exact
    _indicator: Optional[object] = None

    def contains(self, x: np.ndarray) -> bool:
        return bool(self._indicator(np.asarray(x, dtype=np.int64)))

    @property
    def size(self) -> Optional[int]:
        return None if self.members is None else len(self.members)


def good_model_set(sigma: SoficApproximation, u: Neighbourhood,
                   enumeration_budget: int = 10**6) -> GoodModelSet:
    """All configurations whose empirical distribution lies in u;
    exact membership list if X^V fits the budget, otherwise an
    indicator usable by samplers."""
    k = u.target.alphabet_size
    nv = sigma.vertex_count
    window_for = _window_of(u)
    images = vertex_image_matrix(sigma, window_for)
    target = u.target.table

    def indicator(x: np.ndarray) -> bool:
        return float(_batch_tv(x[None, :], images, k, target)[0]) <= u.tol

    if k ** nv <= enumeration_budget:
        total = k ** nv
        digits = np.empty((total, nv), dtype=np.int64)
        idx = np.arange(total, dtype=np.int64)
        for j in range(nv):
            digits[:, j] = (idx // (k ** (nv - 1 - j))) % k
        tv = _batch_tv(digits, images, k, target)
        mask = tv <= u.tol
        return GoodModelSet(True, list(u.target.labels), u.tol,
                            members=digits[mask], member_mask=mask,
                            _indicator=indicator)
    return GoodModelSet(False, list(u.target.labels), u.tol, _indicator=indicator)


def _window_of(u: Neighbourhood) -> GroupWindow:
    if u.window is None:
        raise ValueError("neighbourhood needs its group window attached")
    return u.window


def make_neighbourhood(target: WindowDistribution, tol: float,
                       window: GroupWindow) -> Neighbourhood:
    return Neighbourhood(target, tol, window)


# ---------------------------------------------------------------------------
# lw* / LE / LDE statistics
# ---------------------------------------------------------------------------


@dataclass
class LwReport:
    fraction: float
    n_vertices: int
    distinct_marginals: int
    per_vertex_tv: Optional[np.ndarray] = None


def _pattern_only(mu: MeasureExpr) -> bool:
    """True when the per-vertex marginal depends only on which window
    coordinates collide (iid-structured, possibly conditioned on a
    cell-count event: exchangeable)."""
    if _iid_components(mu) is not None:
        return True
    if isinstance(mu, ConditionedMeasure) and isinstance(
            mu.event, (CellBandEvent, CountVectorEvent)):
        return _iid_components(mu.child) is not None
    return False


def lw_fraction(sigma: SoficApproximation, mu: MeasureExpr, u: Neighbourhood,
                dense_budget: int = 10**6, keep_tv: bool = False,
                rng: Optional[np.random.Generator] = None,
                samples: Optional[int] = None) -> LwReport:
    """Fraction of vertices whose pushforward marginal lies in u."""
    window = _window_of(u)
    images = vertex_image_matrix(sigma, window)  # (|V|, |E|)
    labels = [window.word_label(i) for i in range(len(window))]
    if _pattern_only(mu):
        keys = np.empty(sigma.vertex_count, dtype=object)
        for v in range(sigma.vertex_count):
            row = images[v]
            first: dict[int, int] = {}
            pat = []
            for t in row.tolist():
                first.setdefault(t, len(first))
                pat.append(first[t])
            keys[v] = tuple(pat)
    else:
        keys = np.empty(sigma.vertex_count, dtype=object)
        for v, r in enumerate(images.tolist()):
            keys[v] = tuple(r)
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    tvs = np.empty(len(uniq))
    for j, key in enumerate(uniq):
        v = int(np.nonzero(inverse == j)[0][0])
        marg = _marginal_from_targets(mu, images[v], labels, dense_budget,
                                      rng, samples)
        tvs[j] = tv_distance(marg, u.target)
    good = counts[tvs <= u.tol].sum()
    per_vertex = tvs[inverse] if keep_tv else None
    return LwReport(fraction=float(good / sigma.vertex_count),
                    n_vertices=sigma.vertex_count,
                    distinct_marginals=len(uniq), per_vertex_tv=per_vertex)


def le_mass(sigma: SoficApproximation, mu: MeasureExpr, u: Neighbourhood,
            samples: int = 10_000, rng: Optional[np.random.Generator] = None,
            enumeration_budget: int = 10**5) -> MassEstimate:
    """mu-mass of the u-good models, exact when X^V is enumerable."""
    k = u.target.alphabet_size
    nv = sigma.vertex_count
    if k ** nv <= enumeration_budget and mu.capabilities.exact_atom_mass:
        gms = good_model_set(sigma, u, enumeration_budget=enumeration_budget)
        mass = 0.0
        for row in gms.members:
            mass += mu.atom_mass(row)
        return exact_estimate(mass)
    if rng is None:
        raise ValueError("Monte Carlo le estimate needs an rng")
    window = _window_of(u)
    images = vertex_image_matrix(sigma, window)
    draw = mu.sample(rng, size=samples)
    tv = _batch_tv(draw, images, k, u.target.table)
    return mc_estimate(int((tv <= u.tol).sum()), samples)


@dataclass
class LdeReport:
    pair_mass: MassEstimate
    pair_lw_fraction: float
    single_mass: Optional[MassEstimate] = None


def lde_mass(sigma: SoficApproximation, mu: MeasureExpr, u2: Neighbourhood,
             samples: int = 10_000, rng: Optional[np.random.Generator] = None,
             enumeration_budget: int = 10**5,
             dense_budget: int = 10**6) -> LdeReport:
    """Pair statistic: mass of the u2-good models under two independent
    copies of mu sharing sigma, on the doubled alphabet, plus the doubled
    local weak* fraction."""
    k2 = u2.target.alphabet_size
    k = int(round(math.sqrt(k2)))
    if k * k != k2:
        raise ValueError("pair neighbourhood must use a product alphabet")
    window = _window_of(u2)
    images = vertex_image_matrix(sigma, window)
    labels = [window.word_label(i) for i in range(len(window))]

    # doubled lw*: per-vertex pushforward of mu x mu is the square of the
    # per-vertex pushforward of mu
    lw_good = 0
    seen: dict[tuple, float] = {}
    for v in range(sigma.vertex_count):
        key = tuple(images[v].tolist())
        if key not in seen:
            marg = _marginal_from_targets(mu, images[v], labels, dense_budget,
                                          rng, None)
            seen[key] = tv_distance(marg.pair_square(), u2.target)
        if seen[key] <= u2.tol:
            lw_good += 1
    pair_lw = lw_good / sigma.vertex_count

    nv = sigma.vertex_count
    if k ** (2 * nv) <= enumeration_budget and mu.capabilities.exact_atom_mass:
        total = k ** nv
        digits = np.empty((total, nv), dtype=np.int64)
        idx = np.arange(total, dtype=np.int64)
        for j in range(nv):
            digits[:, j] = (idx // (k ** (nv - 1 - j))) % k
        masses = np.array([mu.atom_mass(row) for row in digits])
        good = 0.0
        for a in range(total):
            if masses[a] == 0:
                continue
            za = digits[a]
            for b in range(total):
                if masses[b] == 0:
                    continue
                pair = za * k + digits[b]
                tv = _batch_tv(pair[None, :], images, k2, u2.target.table)[0]
                if tv <= u2.tol:
                    good += masses[a] * masses[b]
        return LdeReport(exact_estimate(float(good)), pair_lw)

    if rng is None:
        raise ValueError("Monte Carlo lde estimate needs an rng")
    xa = mu.sample(rng, size=samples)
    xb = mu.sample(rng, size=samples)
    pairs = xa * k + xb
    tv = _batch_tv(pairs, images, k2, u2.target.table)
    return LdeReport(mc_estimate(int((tv <= u2.tol).sum()), samples), pair_lw)


@dataclass
class ConvergenceReport:
    lw_good_vertex_fraction: float
    le_good_model_mass: MassEstimate
    lde_good_pair_mass: Optional[MassEstimate]
    lde_pair_lw_fraction: Optional[float]
    window_label: str
    tol: float
    n_vertices: int

    def to_json(self) -> dict:
        def est(e: Optional[MassEstimate]):
            if e is None:
                return None
            return {"estimate": e.estimate, "ci_low": e.ci_low,
                    "ci_high": e.ci_high, "mode": e.mode,
                    "samples": e.sample_count}
        return {
            "lw_good_vertex_fraction": self.lw_good_vertex_fraction,
            "le_good_model_mass": est(self.le_good_model_mass),
            "lde_good_pair_mass": est(self.lde_good_pair_mass),
            "lde_pair_lw_fraction": self.lde_pair_lw_fraction,
            "window": self.window_label,
            "tol": self.tol,
            "n_vertices": self.n_vertices,
        }


def convergence_report(sigma: SoficApproximation, mu: MeasureExpr,
                       u: Neighbourhood, u2: Optional[Neighbourhood] = None,
                       samples: int = 10_000,
                       rng: Optional[np.random.Generator] = None,
                       enumeration_budget: int = 10**5) -> ConvergenceReport:
    lw = lw_fraction(sigma, mu, u)
    le = le_mass(sigma, mu, u, samples=samples, rng=rng,
                 enumeration_budget=enumeration_budget)
    lde = None
    if u2 is not None:
        lde = lde_mass(sigma, mu, u2, samples=samples, rng=rng,
                       enumeration_budget=enumeration_budget)
    return ConvergenceReport(
        lw_good_vertex_fraction=lw.fraction,
        le_good_model_mass=le,
        lde_good_pair_mass=None if lde is None else lde.pair_mass,
        lde_pair_lw_fraction=None if lde is None else lde.pair_lw_fraction,
        window_label=",".join(u.target.labels),
        tol=u.tol,
        n_vertices=sigma.vertex_count,
    )

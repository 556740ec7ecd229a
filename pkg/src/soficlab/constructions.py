"""Executable constructions: conditioning a measure onto a band of
near-equal-mass cells, diagonal subsequence selection, AEP transfer to
big-enough subsets, co-induction products and fibre checks, plus the
prepackaged experiment scenarios the CLI runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from . import convergence as cv
from . import entropy as en
from . import groups as gr
from . import measures as ms

DEFAULT_MASS_FLOOR = lambda n: math.exp(-math.sqrt(n))  # noqa: E731


class EmptyBandError(ValueError):
    """The requested mass band contains no cells of positive mass."""


# ---------------------------------------------------------------------------
# Conditioning onto a mass band
# ---------------------------------------------------------------------------


@dataclass
class ConditioningResult:
    h: float
    k: int
    a_lo: float                    # h - 1/k
    a_hi: float                    # h + 1/k
    event_mass: float
    log_event_mass: float
    conditioned: ms.ConditionedMeasure
    band_spectrum: en.TypeClassTable
    classes_in_band: int
    cells_in_band: int
    classes_above_hi: int          # cells with mass > e^{-(h+1/k) n}
    cells_above_hi: int
    classes_above_lo: int          # cells with mass > e^{-(h-1/k) n}
    cells_above_lo: int
    sandwich_violations: int
    strong_eps_threshold: float

    def sandwich_bounds_log(self) -> tuple[float, float]:
        n = self.band_spectrum.n_sites
        return (-self.a_hi * n - self.log_event_mass,
                -self.a_lo * n - self.log_event_mass)


def aep_condition(nu: ms.MeasureExpr, partition: ms.Partition, h: float,
                  k: int, budget: int = en.TYPE_CLASS_BUDGET) -> ConditioningResult:
    """Condition nu onto the cells whose mass lies in
    (e^{-(h+1/k) n}, e^{-(h-1/k) n}].

    The conditioned measure gives every positive-mass cell a mass inside
    (e^{-(h+1/k) n}/nu(A), e^{-(h-1/k) n}/nu(A)], so it is exactly
    equipartitioned at scale 1/k.
    """
    if k < 1:
        raise ValueError("band index k must be >= 1")
    spec = en.cell_spectrum(nu, partition, budget=budget)
    n = spec.n_sites
    a_lo, a_hi = h - 1 / k, h + 1 / k
    in_band = (spec.log_mass > -a_hi * n) & (spec.log_mass <= -a_lo * n)
    if not in_band.any():
        raise EmptyBandError(
            f"no cells with mass in (e^{{-{a_hi:.4g}n}}, e^{{-{a_lo:.4g}n}}]")
    log_mass_a = float(logsumexp(spec.log_mult[in_band] + spec.log_mass[in_band]))
    event = ms.CellBandEvent(partition, a_lo=a_lo, a_hi=a_hi)
    conditioned = ms.ConditionedMeasure(nu, event)
    band = spec.restricted(in_band)

    def region(mask: np.ndarray) -> tuple[int, int]:
        rows = int(mask.sum())
        cells = 0
        for i in np.nonzero(mask)[0]:
            cells += spec.exact_multiplicity(int(i))
        return rows, cells

    above_hi = spec.log_mass > -a_hi * n
    above_lo = spec.log_mass > -a_lo * n
    cls_band, cells_band = region(in_band)
    cls_hi, cells_hi = region(above_hi)
    cls_lo, cells_lo = region(above_lo)

    lower, upper = -a_hi * n - log_mass_a, -a_lo * n - log_mass_a
    violations = int(((band.log_mass <= lower) | (band.log_mass > upper)).sum())
    threshold = 1 / k + max(0.0, -log_mass_a) / n
    return ConditioningResult(
        h=h, k=k, a_lo=a_lo, a_hi=a_hi,
        event_mass=math.exp(log_mass_a), log_event_mass=log_mass_a,
        conditioned=conditioned, band_spectrum=band,
        classes_in_band=cls_band, cells_in_band=cells_band,
        classes_above_hi=cls_hi, cells_above_hi=cells_hi,
        classes_above_lo=cls_lo, cells_above_lo=cells_lo,
        sandwich_violations=violations, strong_eps_threshold=threshold,
    )


# ---------------------------------------------------------------------------
# Diagonal subsequence selection
# ---------------------------------------------------------------------------


@dataclass
class SelectionReport:
    n_list: list[int]
    k_sequence: list[int]
    availability: dict[int, int]   # k -> first n at which k is ready
    held: list[bool]               # True where the previous k was carried


def _availability_from_scores(k_list: Sequence[int], n_list: Sequence[int],
                              scores: dict[int, Sequence[float]],
                              thresholds: dict[int, float]) -> dict[int, int]:
    """First n in n_list from which the score stays at or above threshold."""
    avail: dict[int, int] = {}
    for k in k_list:
        row = scores[k]
        thr = thresholds[k]
        first = None
        for i in range(len(n_list) - 1, -1, -1):
            if row[i] >= thr:
                first = n_list[i]
            else:
                break
        if first is not None:
            avail[k] = first
    return avail


def diagonal_select(n_list: Sequence[int], k_list: Sequence[int],
                    availability: Optional[dict[int, int]] = None,
                    scores: Optional[dict[int, Sequence[float]]] = None,
                    thresholds: Optional[dict[int, float]] = None,
                    masses: Optional[dict[int, Sequence[float]]] = None,
                    mass_floor: Callable[[int], float] = DEFAULT_MASS_FLOOR,
                    ) -> SelectionReport:
    """Greedy maximal nondecreasing choice of k per n subject to
    readiness (n at or past each k's availability) and, when event
    masses are supplied, the mass-floor schedule."""
    if availability is None:
        if scores is None or thresholds is None:
            raise ValueError("need availability or scores+thresholds")
        availability = _availability_from_scores(k_list, n_list, scores, thresholds)
    if not availability:
        raise ValueError("no k ever becomes ready (degenerate input)")
    ks = sorted(availability)
    seq: list[int] = []
    held: list[bool] = []
    prev: Optional[int] = None
    for i, n in enumerate(n_list):
        feasible = []
        for k in ks:
            if availability[k] > n:
                continue
            if prev is not None and k < prev:
                continue
            if masses is not None and masses[k][i] < mass_floor(n):
                continue
            feasible.append(k)
        if feasible:
            prev = max(feasible)
            seq.append(prev)
            held.append(False)
        elif prev is not None:
            seq.append(prev)
            held.append(True)
        else:
            raise ValueError(f"no k ready at n={n}")
    return SelectionReport(list(n_list), seq, availability, held)


# ---------------------------------------------------------------------------
# AEP transfer to big-enough subsets (pinned-coordinate engine)
# ---------------------------------------------------------------------------


@dataclass
class _PinnedSpectrum:
    """Rows (c0, k) of cells split by the first coordinate's cell:
    multiplicity counts arrangements of the remaining n-1 coordinates,
    mass is the mass of the full cell with count vector k."""

    n_sites: int
    first_cells: np.ndarray      # (m,)
    count_vectors: np.ndarray    # (m, |P|), full-cell counts
    log_mult: np.ndarray         # multinomial over n-1 coordinates
    log_mass: np.ndarray         # full-cell mass


def _pinned_spectrum(nu: ms.MeasureExpr, partition: ms.Partition,
                     budget: int) -> _PinnedSpectrum:
    comps = ms._iid_components(nu)
    if comps is None:
        raise ms.CapabilityError("pinned spectrum needs an iid-structured measure")
    n = nu.n_sites
    sub = en.compositions(n - 1, partition.cell_count, budget=budget)
    sub_mult = gammaln(n) - gammaln(sub + 1).sum(axis=1)
    weights = np.array([w for w, _ in comps])
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    blocks = []
    for c0 in range(partition.cell_count):
        full = sub.copy()
        full[:, c0] += 1
        comp_lm = np.column_stack([
            en._component_log_masses(full, partition.cell_probabilities(p))
            for _, p in comps])
        mass = logsumexp(comp_lm + log_w[None, :], axis=1)
        blocks.append((np.full(len(sub), c0), full, sub_mult, mass))
    first = np.concatenate([b[0] for b in blocks])
    counts = np.vstack([b[1] for b in blocks])
    mult = np.concatenate([b[2] for b in blocks])
    mass = np.concatenate([b[3] for b in blocks])
    keep = ~np.isneginf(mass)
    return _PinnedSpectrum(n, first[keep], counts[keep], mult[keep], mass[keep])


@dataclass
class TransferReport:
    kappa: float
    mass_a: float
    mass_b: float
    aep_on_b: en.AEPReport
    ratio_identity_max_dev: float      # max |log nu(C|B) - kappa - log nu(C|A)|
    residual_rows: list[dict]          # per eps: residual mass and its bounds


def aep_transfer_check(nu: ms.MeasureExpr, partition: ms.Partition, h: float,
                       event_a: ms.CellBandEvent | ms.CountVectorEvent,
                       pin_cell: Optional[int] = None,
                       b_restrict: Optional[Callable[[np.ndarray], bool]] = None,
                       eps_list: Sequence[float] = (0.1,),
                       budget: int = en.TYPE_CLASS_BUDGET) -> TransferReport:
    """Instance check that conditioning on B (a subset of A that keeps
    at least e^{-kappa} of A's mass) preserves the AEP band structure.

    B is A intersected with {first coordinate's cell == pin_cell} (when
    given) and with an optional extra count-vector predicate.  Verifies
    the exact identity nu(C|B) = e^kappa nu(C|A) on cells inside B and
    the residual band-mass bound |Q| e^{-h n - 2 eps n} < e^{-eps n}.
    """
    pin = _pinned_spectrum(nu, partition, budget=budget)
    n = pin.n_sites

    if isinstance(event_a, ms.CellBandEvent):
        mask_a = np.asarray(event_a.contains_log_mass(pin.log_mass, n))
    else:
        mask_a = np.array([event_a.contains_counts(kv) for kv in pin.count_vectors])
    mask_b = mask_a.copy()
    if pin_cell is not None:
        mask_b &= pin.first_cells == pin_cell
    if b_restrict is not None:
        mask_b &= np.array([bool(b_restrict(kv)) for kv in pin.count_vectors])
    if not mask_a.any() or not mask_b.any():
        raise EmptyBandError("event A or B carries no mass")

    log_a = float(logsumexp(pin.log_mult[mask_a] + pin.log_mass[mask_a]))
    log_b = float(logsumexp(pin.log_mult[mask_b] + pin.log_mass[mask_b]))
    kappa = log_a - log_b

    # full-cell conditional masses; rows of B split a cell only by the
    # pinned coordinate, so group back to distinct count vectors
    bs = _group_by_counts(pin, mask_b)
    b_spec = en.TypeClassTable(
        n_sites=n, partition=partition,
        log_mult=bs["log_mult"], log_mass=bs["log_mass"] - log_b,
        count_vectors=bs["counts"], kind="pinned|conditioned")
    aep_b = en.aep_check(b_spec, None, h, eps_list=eps_list)

    # identity nu(C|B) = e^kappa nu(C|A) for cells C inside B
    dev = float(np.abs((bs["log_mass"] - log_b) - kappa
                       - (bs["log_mass"] - log_a)).max())

    plain = en.cell_spectrum(nu, partition, budget=budget)
    residual_rows = []
    for eps in eps_list:
        band_a = ((plain.log_mass > -(h + eps) * n)
                  & (plain.log_mass < -(h - eps) * n))
        if band_a.any():
            log_q = float(logsumexp(plain.log_mult[band_a]))
        else:
            log_q = -np.inf
        # rows of B in A's eps-band whose conditional-B mass is small
        in_band_b = ((bs["log_mass"] > -(h + eps) * n)
                     & (bs["log_mass"] < -(h - eps) * n))
        small = in_band_b & (bs["log_mass"] - log_b < -h * n - 2 * eps * n)
        if small.any():
            residual = float(logsumexp(bs["log_mult"][small]
                                       + bs["log_mass"][small])) - log_b
        else:
            residual = -np.inf
        bound = log_q - h * n - 2 * eps * n
        residual_rows.append({
            "eps": eps,
            "log_residual_mass": residual,
            "log_bound_cells": bound,
            "log_decay_target": -eps * n,
            "residual_ok": residual <= bound + 1e-9,
            "bound_decays": bound < -eps * n,
        })
    return TransferReport(kappa=kappa, mass_a=math.exp(log_a),
                          mass_b=math.exp(log_b), aep_on_b=aep_b,
                          ratio_identity_max_dev=dev,
                          residual_rows=residual_rows)


def _group_by_counts(pin: _PinnedSpectrum, mask: np.ndarray) -> dict:
    counts = pin.count_vectors[mask]
    mult = pin.log_mult[mask]
    mass = pin.log_mass[mask]
    uniq, inverse = np.unique(counts, axis=0, return_inverse=True)
    out_mult = np.array([logsumexp(mult[inverse == i]) for i in range(len(uniq))])
    # the full-cell mass depends only on the count vector
    out_mass = np.array([mass[inverse == i][0] for i in range(len(uniq))])
    order = np.argsort(-out_mass, kind="stable")
    return {"counts": uniq[order], "log_mult": out_mult[order],
            "log_mass": out_mass[order]}


# ---------------------------------------------------------------------------
# Co-induction
# ---------------------------------------------------------------------------


def coinduct_measure(mu: ms.MeasureExpr, fibre_count: int) -> ms.MeasureExpr:
    """Independent product of fibre copies of mu over X^{V x W},
    row-major (v, w) -> v*|W| + w, matching the product approximation."""
    if fibre_count < 1:
        raise ValueError("need at least one fibre")
    if isinstance(mu, ms.ProductMeasure) and mu.iid:
        return ms.ProductMeasure(mu.alphabet, mu.p, n_sites=mu.n_sites * fibre_count)
    return ms.FibreProduct([mu] * fibre_count)


@dataclass
class FibreReport:
    fractions: list[float]
    z_set: list[int]
    z_ratio: float
    eps: float
    markov_ok: bool
    mean_bad_fraction: float


def fibre_lw_check(nu: ms.MeasureExpr, sigma: gr.SoficApproximation,
                   u: cv.Neighbourhood, eps: float,
                   samples: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> FibreReport:
    """Per-fibre local weak* fractions against the target, and the set Z
    of fibres whose fraction reaches 1 - eps.  The number of excluded
    fibres obeys the averaging bound |W \\ Z| * eps <= sum of per-fibre
    bad fractions."""
    if hasattr(nu, "fibre_marginal"):
        w_count = nu.fibre_count
        fractions = [cv.lw_fraction(sigma, nu.fibre_marginal(w), u).fraction
                     for w in range(w_count)]
    else:
        if samples is None or rng is None:
            raise ms.CapabilityError(
                "non-product fibre check needs samples and rng")
        draw = nu.sample(rng, size=samples)
        w_count = getattr(nu, "fibre_count", None)
        if w_count is None:
            raise ms.CapabilityError("measure does not expose fibres")
        fractions = []
        window = u.window
        images = cv.vertex_image_matrix(sigma, window)
        k = u.target.alphabet_size
        d = len(u.target.table)
        for w in range(w_count):
            slc = draw[:, w::w_count]
            good = 0
            for v in range(sigma.vertex_count):
                codes = ms.encode_configs(slc[:, images[v]], k)
                counts = np.bincount(codes, minlength=d)
                tv = 0.5 * np.abs(counts / samples - u.target.table).sum()
                if tv <= u.tol:
                    good += 1
            fractions.append(good / sigma.vertex_count)
    z = [w for w, f in enumerate(fractions) if f >= 1 - eps]
    bad = [1 - f for f in fractions]
    markov_ok = (w_count - len(z)) * eps <= sum(bad) + 1e-12
    return FibreReport(fractions=fractions, z_set=z,
                       z_ratio=len(z) / w_count, eps=eps,
                       markov_ok=markov_ok,
                       mean_bad_fraction=float(np.mean(bad)))


# ---------------------------------------------------------------------------
# Scenario battery
# ---------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    scenario: str
    data: dict
    tables: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    invariants: dict = field(default_factory=dict)


def _entropy_of(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    mask = p > 0
    return float(-(p[mask] * np.log(p[mask])).sum())


def _build_sofic(spec: dict, n: int, seed: int) -> tuple[gr.SoficApproximation, gr.GroupWindow]:
    kind = spec.get("kind", "cyclic")
    radius = int(spec.get("window_radius", 1))
    if kind == "cyclic":
        sigma = gr.cyclic_sofic(n)
        window = gr.ball(gr.integer_lattice(1), ["t"], radius)
        return sigma, window
    if kind == "random_free":
        rank = int(spec.get("rank", 2))
        sigma = gr.random_sofic(rank, n, seed=seed)
        window = gr.ball(gr.free_group(rank), sigma.generator_labels(), radius)
        return sigma, window
    raise ValueError(f"unknown sofic kind {kind!r}")


def scenario_mixture_example(cfg: dict, budget_cells: int = en.TYPE_CLASS_BUDGET,
                             budget_samples: int = 10**6) -> ScenarioResult:
    """Two-component iid mixture: exact covering growth at rate H(p),
    local weak* convergence to the mixture, empirical non-convergence,
    and the band conditioning at rate H(q)."""
    alphabet = ms.Alphabet(list(cfg.get("alphabet", ["0", "1"])))
    p = np.array(cfg["p"], dtype=float)
    q = np.array(cfg["q"], dtype=float)
    hp, hq = _entropy_of(p), _entropy_of(q)
    if not hp > hq:
        raise ValueError("the mixture scenario needs H(p) > H(q)")
    part = ms.Partition.singletons(alphabet)
    n_list = sorted(int(n) for n in cfg["n_list"])
    eps_list = list(cfg.get("eps_list", en.EPS_GRID_DEFAULT))
    eps_main = float(cfg.get("cov_eps", 0.05))
    tol = float(cfg.get("tol", 0.05))
    samples = min(int(cfg.get("samples", 10_000)), budget_samples)
    seeds = [int(s) for s in cfg.get("seeds", [1])]
    k_band = int(cfg.get("k_band", 10))
    sofic_spec = {**cfg.get("sofic", {"kind": "random_free", "rank": 2}),
                  "window_radius": cfg.get("window_radius", 1)}

    rows = []
    cov_series = []
    vertex_tv_rows: list[list] = []
    dump_tv = bool(cfg.get("dump_vertex_tv", False))
    violations = 0
    min_slack = math.inf
    for n in n_list:
        mu = ms.MixtureMeasure([0.5, 0.5], [
            ms.ProductMeasure(alphabet, p, n_sites=n),
            ms.ProductMeasure(alphabet, q, n_sites=n)])
        spec = en.build_type_classes(mu, part, budget=budget_cells)
        h_rep = en.shannon_entropy(spec)
        covs = {eps: en.covering_number(spec, None, eps) for eps in eps_list}
        if eps_main not in covs:
            covs[eps_main] = en.covering_number(spec, None, eps_main)
        cov_series.append((n, covs[eps_main].log_count))
        aep_hp = en.aep_check(spec, None, hp, eps_list=eps_list)
        cond = aep_condition(mu, part, hq, k_band, budget=budget_cells)
        cond_h = en.shannon_entropy(cond.band_spectrum)
        violations += cond.sandwich_violations
        for eps in eps_list:
            gap = en.entropy_covering_gap(spec, None, eps)
            if not gap.holds:
                violations += 1
            min_slack = min(min_slack, gap.slack)

        for seed in seeds:
            sigma, window = _build_sofic(sofic_spec, n, seed)
            mix_target = ms.mix_windows([0.5, 0.5], [
                ms.iid_window_target(p, window), ms.iid_window_target(q, window)])
            p_target = ms.iid_window_target(p, window)
            u_mix = cv.make_neighbourhood(mix_target, tol, window)
            u_p = cv.make_neighbourhood(p_target, tol, window)
            rng = np.random.default_rng([seed, n, 2])
            keep_tv = dump_tv and n == n_list[-1] and seed == seeds[0]
            lw_mix = cv.lw_fraction(sigma, mu, u_mix, keep_tv=keep_tv)
            if keep_tv:
                vertex_tv_rows = [[n, seed, v, float(t)]
                                  for v, t in enumerate(lw_mix.per_vertex_tv)]
            lw_p = cv.lw_fraction(sigma, mu, u_p)
            le_mix = cv.le_mass(sigma, mu, u_mix, samples=samples, rng=rng)
            rows.append({
                "n": n, "seed": seed,
                "H": h_rep.h_nats, "H_per_site": h_rep.normalized,
                "log_cov_main": covs[eps_main].log_count,
                "cov_counts": {str(eps): covs[eps].log_count for eps in sorted(covs)},
                "aep_hp_band_mass": dict(zip(map(str, aep_hp.eps_list),
                                             aep_hp.band_masses)),
                "conditioning": {
                    "h": hq, "k": k_band,
                    "event_mass": cond.event_mass,
                    "conditioned_rate": cond_h.normalized,
                    "strong_eps_threshold": cond.strong_eps_threshold,
                    "classes_in_band": cond.classes_in_band,
                },
                "lw_mixture_fraction": lw_mix.fraction,
                "lw_p_target_fraction": lw_p.fraction,
                "le_mixture": le_mix.estimate,
                "le_ci_high": le_mix.ci_high,
                "le_mode": le_mix.mode,
            })

    if len(cov_series) >= 2:
        rate = en.rate_estimate(cov_series)
        cov_rate = {"slope": rate.slope, "intercept": rate.intercept,
                    "target": hp,
                    "relative_error": abs(rate.slope - hp) / hp}
    else:
        cov_rate = {"slope": None, "target": hp, "relative_error": None}
    data = {
        "p": p.tolist(), "q": q.tolist(), "H_p": hp, "H_q": hq,
        "cov_eps": eps_main,
        "cov_rate": cov_rate,
        "rows": rows,
    }
    header = ["n", "seed", "H_per_site", "log_cov_main", "event_mass",
              "conditioned_rate", "lw_mixture_fraction",
              "lw_p_target_fraction", "le_mixture", "le_ci_high"]
    table = [[r["n"], r["seed"], r["H_per_site"], r["log_cov_main"],
              r["conditioning"]["event_mass"],
              r["conditioning"]["conditioned_rate"],
              r["lw_mixture_fraction"], r["lw_p_target_fraction"],
              r["le_mixture"], r["le_ci_high"]] for r in rows]
    aep_header = ["n", "eps", "band_mass_at_H_p"]
    aep_table = [[r["n"], eps, mass]
                 for r in rows if r["seed"] == seeds[0]
                 for eps, mass in sorted(r["aep_hp_band_mass"].items(),
                                         key=lambda kv: float(kv[0]))]
    tables = {"mixture_series": (header, table),
              "mixture_aep": (aep_header, aep_table)}
    if vertex_tv_rows:
        tables["mixture_vertex_tv"] = (["n", "seed", "vertex", "tv"],
                                       vertex_tv_rows)
    return ScenarioResult(
        scenario="mixture_example", data=data,
        tables=tables,
        invariants={"sandwich_violations": violations,
                    "entropy_cov_min_slack": min_slack,
                    **({"cov_rate_relative_error": cov_rate["relative_error"]}
                       if cov_rate["relative_error"] is not None else {})},
    )


def majority_event(partition: ms.Partition, n: int, cell: int = 0) -> ms.CountVectorEvent:
    return ms.CountVectorEvent(partition,
                               lambda k, c=cell, m=n: k[c] * 2 > m,
                               description=f"majority of cell {cell}")


def scenario_conditioning_stability(cfg: dict,
                                    budget_cells: int = en.TYPE_CLASS_BUDGET,
                                    budget_samples: int = 10**6) -> ScenarioResult:
    """Conditioning an iid measure on a positive-mass event keeps the
    good-model mass up to the 1 - bad/a averaging bound."""
    alphabet = ms.Alphabet(list(cfg.get("alphabet", ["0", "1"])))
    p = np.array(cfg["p"], dtype=float)
    part = ms.Partition.singletons(alphabet)
    n_list = sorted(int(n) for n in cfg["n_list"])
    tol = float(cfg.get("tol", 0.15))
    samples = min(int(cfg.get("samples", 10_000)), budget_samples)
    seeds = [int(s) for s in cfg.get("seeds", [1])]
    a_floor = float(cfg.get("a_floor", 0.49))
    sofic_spec = {**cfg.get("sofic", {"kind": "cyclic"}),
                  "window_radius": cfg.get("window_radius", 1)}

    rows = []
    for n in n_list:
        mu = ms.ProductMeasure(alphabet, p, n_sites=n)
        event = majority_event(part, n)
        nu = ms.ConditionedMeasure(mu, event)
        a = math.exp(nu.event_log_mass())
        for seed in seeds:
            sigma, window = _build_sofic(sofic_spec, n, seed)
            target = ms.iid_window_target(p, window)
            u = cv.make_neighbourhood(target, tol, window)
            rng = np.random.default_rng([seed, n, 3])
            lw_u = cv.lw_fraction(sigma, mu, u)
            lw_c = cv.lw_fraction(sigma, nu, u)
            le_u = cv.le_mass(sigma, mu, u, samples=samples, rng=rng)
            le_c = cv.le_mass(sigma, nu, u, samples=samples, rng=rng)
            bad_u = 1 - le_u.estimate
            bad_c = 1 - le_c.estimate
            ci = (le_u.half_width / a_floor) + le_c.half_width
            bound = bad_u / a_floor + ci
            rows.append({
                "n": n, "seed": seed, "event_mass": a,
                "lw_unconditioned": lw_u.fraction,
                "lw_conditioned": lw_c.fraction,
                "le_unconditioned": le_u.estimate,
                "le_conditioned": le_c.estimate,
                "bad_unconditioned": bad_u,
                "bad_conditioned": bad_c,
                "bound_with_ci": bound,
                "part1_ok": bad_c <= bound + 1e-12,
                "mode": le_c.mode,
            })
    all_ok = all(r["part1_ok"] for r in rows)
    header = ["n", "seed", "event_mass", "lw_unconditioned", "lw_conditioned",
              "le_unconditioned", "le_conditioned", "bad_conditioned",
              "bound_with_ci", "part1_ok"]
    table = [[r[c] for c in header] for r in rows]
    return ScenarioResult(
        scenario="conditioning_stability",
        data={"p": p.tolist(), "a_floor": a_floor, "tol": tol, "rows": rows},
        tables={"conditioning_series": (header, table)},
        invariants={"part1_all_ok": all_ok},
    )


def scenario_coinduction(cfg: dict, budget_cells: int = en.TYPE_CLASS_BUDGET,
                         budget_samples: int = 10**6) -> ScenarioResult:
    """Entropy additivity of fibre powers, fibre marginal identity, a
    corrupted-fibre selection instance, and covering monotonicity on a
    small exact instance."""
    alphabet = ms.Alphabet(list(cfg.get("alphabet", ["0", "1"])))
    p = np.array(cfg["p"], dtype=float)
    part = ms.Partition.singletons(alphabet)
    v_list = [int(v) for v in cfg.get("v_list", [10, 100, 1000])]
    w_list = [int(w) for w in cfg.get("w_list", [2, 4, 8])]

    add_rows = []
    worst = 0.0
    for v in v_list:
        mu = ms.ProductMeasure(alphabet, p, n_sites=v)
        h1 = en.shannon_entropy(mu, part, budget=budget_cells).h_nats
        for w in w_list:
            big = coinduct_measure(mu, w)
            hw = en.shannon_entropy(big, part, budget=budget_cells).h_nats
            rel = abs(hw - w * h1) / (w * h1)
            worst = max(worst, rel)
            add_rows.append([v, w, h1, hw, w * h1, rel])

    # corrupted fibre: all clean fibres match the target, the noisy one
    # misses it at every vertex
    fw = int(cfg.get("fibre_w", 16))
    fv = int(cfg.get("fibre_v", 50))
    eps_fibre = float(cfg.get("fibre_eps", 0.1))
    clean = ms.ProductMeasure(alphabet, p, n_sites=fv)
    noise = ms.ProductMeasure(alphabet,
                              np.full(alphabet.size, 1.0 / alphabet.size),
                              n_sites=fv)
    corrupted = ms.FibreProduct([clean] * (fw - 1) + [noise])
    sigma = gr.cyclic_sofic(fv)
    window = gr.ball(gr.integer_lattice(1), ["t"], 1)
    target = ms.iid_window_target(p, window)
    u = cv.make_neighbourhood(target, float(cfg.get("fibre_tol", 0.05)), window)
    clean_power = coinduct_measure(clean, fw)
    if isinstance(clean_power, ms.ProductMeasure):
        clean_power = ms.FibreProduct([clean] * fw)
    fibre_all = fibre_lw_check(clean_power, sigma, u, eps_fibre)
    fibre_bad = fibre_lw_check(corrupted, sigma, u, eps_fibre)

    # covering monotone under fibre powers on a small exact instance
    small_n, small_w, cov_eps = 6, 2, 0.2
    small = ms.MixtureMeasure([0.5, 0.5], [
        ms.ProductMeasure(alphabet, p, n_sites=small_n),
        ms.ProductMeasure(alphabet,
                          np.full(alphabet.size, 1.0 / alphabet.size),
                          n_sites=small_n)])
    base_cov = en.covering_number(small, part, cov_eps, budget=budget_cells)
    power_cov = en.covering_number(ms.FibreProduct([small] * small_w), part,
                                   cov_eps, budget=budget_cells)
    cov_monotone = power_cov.log_count >= base_cov.log_count - 1e-12

    prod = gr.product_sofic(gr.cyclic_sofic(3), gr.cyclic_sofic(4))
    pw = gr.product_window(gr.ball(gr.integer_lattice(1), ["t"], 1),
                           gr.ball(gr.integer_lattice(1), ["t"], 1))
    prod_defect = gr.defect(prod, pw)

    header = ["V", "W", "H_V", "H_VxW", "W_times_H_V", "relative_deviation"]
    return ScenarioResult(
        scenario="coinduction",
        data={
            "p": p.tolist(),
            "additivity_rows": [dict(zip(header, r)) for r in add_rows],
            "worst_relative_deviation": worst,
            "fibre_all_ratio": fibre_all.z_ratio,
            "fibre_corrupted_ratio": fibre_bad.z_ratio,
            "fibre_w": fw,
            "cov_monotone_small": cov_monotone,
            "base_cov_log": base_cov.log_count,
            "power_cov_log": power_cov.log_count,
            "product_defect_max": prod_defect.max_defect(),
        },
        tables={"coinduction_additivity": (header, add_rows)},
        invariants={"additivity_worst_rel": worst,
                    "fibre_markov_ok": fibre_bad.markov_ok,
                    "cov_monotone_small": cov_monotone,
                    "product_defect_max": prod_defect.max_defect()},
    )


SCENARIOS: dict[str, Callable[..., ScenarioResult]] = {
    "mixture_example": scenario_mixture_example,
    "conditioning_stability": scenario_conditioning_stability,
    "coinduction": scenario_coinduction,
}

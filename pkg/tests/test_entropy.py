import math

import numpy as np
import pytest

import soficlab as sl
from soficlab.entropy import (EPS_GRID_DEFAULT, binary_entropy_nats,
                              compositions)
from soficlab.measures import decode_config

AB = sl.Alphabet(["0", "1"])
P2 = sl.Partition.singletons(AB)


def H(p):
    p = np.asarray(p, dtype=float)
    mask = p > 0
    return float(-(p[mask] * np.log(p[mask])).sum())


def mixture(n, p=(0.5, 0.5), q=(0.9, 0.1)):
    return sl.MixtureMeasure([0.5, 0.5], [
        sl.ProductMeasure(AB, np.array(p), n),
        sl.ProductMeasure(AB, np.array(q), n)])


# --- type classes ------------------------------------------------------------


def test_binomial_type_classes_n2():
    spec = sl.build_type_classes(sl.ProductMeasure(AB, np.array([0.5, 0.5]), 2), P2)
    assert sorted(map(tuple, spec.count_vectors.tolist())) == [(0, 2), (1, 1), (2, 0)]
    assert sorted(np.exp(spec.log_mult).round(9).tolist()) == [1.0, 1.0, 2.0]
    assert np.allclose(np.exp(spec.log_mass), 0.25)


def test_type_class_totals_large():
    spec = sl.build_type_classes(sl.ProductMeasure(AB, np.array([0.7, 0.3]), 1000), P2)
    assert abs(spec.total_log_mass()) < 1e-9
    mix = mixture(1000)
    assert abs(sl.cell_spectrum(mix, P2).total_log_mass()) < 1e-9


def test_multiplicities_match_exact_multinomials():
    ab3 = sl.Alphabet(["a", "b", "c"])
    p3 = sl.Partition.singletons(ab3)
    spec = sl.build_type_classes(
        sl.ProductMeasure(ab3, np.array([0.5, 0.3, 0.2]), 60), p3)
    for i in range(0, len(spec), 97):
        exact = spec.exact_multiplicity(i)
        assert abs(spec.log_mult[i] - math.log(exact)) <= 1e-10 * abs(math.log(max(exact, 2)))


def test_multiplicity_log_gamma_accuracy_at_1e4():
    spec = sl.build_type_classes(sl.ProductMeasure(AB, np.array([0.5, 0.5]), 10 ** 4), P2)
    for k in [0, 17, 1234, 5000, 9999]:
        i = int(np.nonzero(spec.count_vectors[:, 1] == k)[0][0])
        exact = math.comb(10 ** 4, k)
        assert abs(spec.log_mult[i] - math.log(exact)) <= 1e-9 * max(1.0, math.log(exact))


def test_mixture_rows_combine_component_masses():
    mix = mixture(5)
    spec = sl.build_type_classes(mix, P2)
    for i in range(len(spec)):
        counts = spec.count_vectors[i]
        expect = 0.5 * 0.5 ** 5 + 0.5 * (0.9 ** counts[0] * 0.1 ** counts[1])
        assert math.exp(spec.log_mass[i]) == pytest.approx(expect, rel=1e-12)


def test_compositions_budget():
    with pytest.raises(sl.BudgetExceededError):
        compositions(10 ** 4, 4, budget=10 ** 5)


# --- entropy -----------------------------------------------------------------


def test_entropy_uniform_exact():
    for n in (1, 10, 500):
        rep = sl.shannon_entropy(sl.ProductMeasure(AB, np.array([0.5, 0.5]), n), P2)
        assert rep.h_nats == pytest.approx(n * math.log(2), rel=1e-12)


def test_entropy_single_site_closed_form():
    rep = sl.shannon_entropy(sl.ProductMeasure(AB, np.array([0.9, 0.1]), 1), P2)
    assert rep.h_nats == pytest.approx(-(0.9 * math.log(0.9) + 0.1 * math.log(0.1)),
                                       rel=1e-12)


def test_entropy_additive_over_fibres():
    mu = sl.ProductMeasure(AB, np.array([0.7, 0.3]), 40)
    h1 = sl.shannon_entropy(mu, P2).h_nats
    big = sl.coinduct_measure(mu, 6)
    h6 = sl.shannon_entropy(big, P2).h_nats
    assert h6 == pytest.approx(6 * h1, rel=1e-11)


def test_entropy_relabel_invariance():
    p = np.array([0.3, 0.2, 0.5])
    ab3 = sl.Alphabet(["x", "y", "z"])
    p3 = sl.Partition.singletons(ab3)
    h1 = sl.shannon_entropy(sl.ProductMeasure(ab3, p, 30), p3).h_nats
    h2 = sl.shannon_entropy(sl.ProductMeasure(ab3, p[[2, 0, 1]], 30), p3).h_nats
    assert h1 == pytest.approx(h2, rel=1e-12)


def test_entropy_mixture_component_breakdown():
    rep = sl.shannon_entropy(mixture(100), P2)
    assert rep.component_h is not None
    assert rep.component_h[0] == pytest.approx(100 * H([0.5, 0.5]), rel=1e-9)
    assert rep.component_h[1] == pytest.approx(100 * H([0.9, 0.1]), rel=1e-9)


def test_entropy_sampled_fallback():
    base = sl.ProductMeasure(AB, np.array([0.5, 0.5]), 4)
    nu = sl.ConditionedMeasure(
        base, sl.measures.ExplicitEvent(lambda x: x[0] == 0, "pinned"))
    rep = sl.shannon_entropy(nu, P2, samples=4000, rng=np.random.default_rng(0))
    assert rep.method == "sampled"
    assert rep.h_nats == pytest.approx(3 * math.log(2), abs=0.1)


# --- covering ---------------------------------------------------------------


def brute_force_covering(masses, eps):
    """Oracle: sort all cell masses, take until the running sum exceeds 1-eps."""
    masses = sorted(masses, reverse=True)
    acc, count = 0.0, 0
    for m in masses:
        acc += m
        count += 1
        if acc > 1 - eps:
            return count, acc
    return count, acc


@pytest.mark.parametrize("n,eps", [(4, 0.3), (6, 0.1), (8, 0.25), (5, 0.5)])
def test_covering_uniform_formula(n, eps):
    mu = sl.ProductMeasure(AB, np.array([0.5, 0.5]), n)
    rep = sl.covering_number(mu, P2, eps)
    assert rep.count == math.floor((1 - eps) * 2 ** n) + 1
    oracle, _ = brute_force_covering([2.0 ** -n] * 2 ** n, eps)
    assert rep.count == oracle


def test_covering_point_mass():
    mu = sl.SparseMeasure(AB, np.array([[0, 1, 1]]), np.array([1.0]))
    for eps in (0.9, 0.5, 0.01):
        assert sl.covering_number(mu, P2, eps).count == 1


@pytest.mark.parametrize("eps", [0.05, 0.2, 0.4])
def test_covering_matches_bruteforce_on_mixture(eps):
    n = 10
    mix = mixture(n)
    masses = [mix.atom_mass(decode_config(c, 2, n)) for c in range(2 ** n)]
    oracle, oracle_mass = brute_force_covering(masses, eps)
    rep = sl.covering_number(mix, P2, eps)
    assert rep.count == oracle
    assert rep.achieved_mass == pytest.approx(oracle_mass, abs=1e-9)


def test_covering_conditioned_matches_bruteforce():
    n = 9
    mix = mixture(n)
    nu = sl.ConditionedMeasure(mix, sl.CellBandEvent(P2, 0.1, 1.5))
    masses = [nu.atom_mass(decode_config(c, 2, n)) for c in range(2 ** n)]
    oracle, _ = brute_force_covering(masses, 0.2)
    assert sl.covering_number(nu, P2, 0.2).count == oracle


def test_covering_mixture_rate_band():
    # log cov / n sits within [0.98, 1.0] * ln 2 at n = 1000, eps = 0.05
    rep = sl.covering_number(mixture(1000), P2, 0.05)
    rate = rep.log_count / 1000
    assert 0.98 * math.log(2) <= rate <= 1.0 * math.log(2)


def test_covering_monotone_in_eps():
    mix = mixture(300)
    spec = sl.cell_spectrum(mix, P2)
    logs = [sl.covering_number(spec, None, eps).log_count
            for eps in sorted(EPS_GRID_DEFAULT)]
    assert all(a >= b - 1e-12 for a, b in zip(logs, logs[1:]))


def test_covering_invariant_under_identity_coarsening():
    mu = sl.ProductMeasure(AB, np.array([0.7, 0.3]), 50)
    a = sl.covering_number(mu, P2, 0.1)
    b = sl.covering_number(mu, sl.Partition(np.array([0, 1]), 2), 0.1)
    assert a.log_count == b.log_count


def test_covering_huge_uniform_log_only():
    eq = sl.equipartition(AB, P2, 2000, 2 ** 2000)
    rep = sl.covering_number(eq, P2, 0.25)
    assert rep.count is None  # the split size exceeds float range
    assert rep.log_count == pytest.approx(2000 * math.log(2) + math.log(0.75), abs=1e-6)


# --- AEP ---------------------------------------------------------------------


def test_aep_equipartition_strong():
    eq = sl.equipartition(AB, P2, 100, int(round(math.exp(0.5 * 100))))
    rep = sl.aep_check(eq, P2, 0.5, eps_list=[0.25, 0.1, 0.05, 0.01])
    assert rep.band_masses == [1.0, 1.0, 1.0, 1.0]
    assert rep.strong


def test_aep_iid_typical_mass_with_binomial_oracle():
    n, eps = 2000, 0.05
    p = np.array([0.7, 0.3])
    h = H(p)
    rep = sl.aep_check(sl.ProductMeasure(AB, p, n), P2, h, eps_list=[eps])
    assert rep.band_masses[0] >= 0.99
    # Hoeffding oracle: the band holds iff |k/n - 0.3| < eps/|log(0.3/0.7)|
    delta = eps / abs(math.log(0.3 / 0.7))
    hoeffding = 2 * math.exp(-2 * n * delta ** 2)
    assert rep.band_masses[0] >= 1 - hoeffding - 1e-9


def test_aep_mixture_mass_tends_to_half():
    rep = sl.aep_check(mixture(1000), P2, math.log(2), eps_list=[0.1])
    assert rep.band_masses[0] == pytest.approx(0.5, abs=0.01)
    small = sl.aep_check(mixture(100), P2, math.log(2), eps_list=[0.1])
    big = sl.aep_check(mixture(2000), P2, math.log(2), eps_list=[0.1])
    assert abs(big.band_masses[0] - 0.5) < abs(small.band_masses[0] - 0.5) + 1e-12


def test_aep_band_mass_monotone_in_eps():
    rep = sl.aep_check(mixture(400), P2, H([0.9, 0.1]),
                       eps_list=[0.01, 0.05, 0.1, 0.25])
    masses = rep.band_masses
    assert all(a <= b + 1e-12 for a, b in zip(masses, masses[1:]))


# --- rate estimation ---------------------------------------------------------


def test_rate_exact_linear():
    rep = sl.rate_estimate([(10, 7.0), (20, 14.0), (40, 28.0)])
    assert rep.slope == pytest.approx(0.7, rel=1e-12)
    assert max(abs(r) for r in rep.residuals) < 1e-12


def test_rate_affine_recovers_slope():
    pts = [(n, n * math.log(2) + math.log(0.9)) for n in (250, 500, 1000)]
    rep = sl.rate_estimate(pts)
    assert abs(rep.slope - math.log(2)) < 1e-3


def test_rate_needs_two_points():
    with pytest.raises(ValueError):
        sl.rate_estimate([(10, 1.0)])


# --- metric covering bounds --------------------------------------------------


def test_metric_bounds_discrete_metric_singletons():
    mu = sl.ProductMeasure(AB, np.array([0.7, 0.3]), 12)
    mb = sl.metric_cov_bounds(mu, AB, delta=0.5, eps=0.1, p_fine=P2)
    assert mb.upper_log == sl.covering_number(mu, P2, 0.1).log_count
    assert mb.lower_log <= mb.upper_log


def test_metric_bounds_ordering_across_instances():
    for n in (8, 20, 60):
        for eps in (0.05, 0.1, 0.15):
            mb = sl.metric_cov_bounds(mixture(n), AB, 0.9, eps, P2)
            assert mb.lower_log <= mb.upper_log + 1e-12
            assert mb.lower_log >= 0.0


def test_metric_bounds_preconditions():
    mu = sl.ProductMeasure(AB, np.array([0.7, 0.3]), 10)
    with pytest.raises(ValueError):
        sl.metric_cov_bounds(mu, AB, 0.5, 0.2, P2)  # eps >= 1/6
    coarse = sl.Partition.trivial(AB)  # diameter 1 >= delta
    with pytest.raises(ValueError):
        sl.metric_cov_bounds(mu, AB, 0.5, 0.1, coarse)


def test_hamming_ball_counts():
    assert sl.hamming_ball_count(10, 0, 2).count == 1
    assert sl.hamming_ball_count(12, 3, 2).count == 1 + 12 + 66 + 220 == 299
    assert sl.hamming_ball_count(5, 2, 3).count == 1 + 5 * 2 + 10 * 4


def test_hamming_exact_below_growth_bound():
    for n in range(1, 21):
        for eps in (0.05, 0.1):
            r = math.floor(3 * eps * n)
            exact = sl.hamming_ball_count(n, r, 2)
            bound = sl.hamming_ball_growth_bound(n, 3 * eps, 2)
            assert exact.log_count <= bound + 1e-12


def test_hamming_bound_at_n12():
    count = sl.hamming_ball_count(12, 3, 2).count
    bound = math.exp(12 * binary_entropy_nats(0.25) + 0.25 * 12 * math.log(2))
    # radius 3 = floor(3 * eps * 12) with eps about 0.0833..0.111
    assert count <= bound


def test_hamming_count_matches_exhaustive_ball_enumeration():
    # oracle: walk every configuration and measure its distance to a center
    for n, r, cells in [(12, 3, 2), (8, 2, 3), (10, 4, 2)]:
        center = np.zeros(n, dtype=int)
        inside = 0
        for code in range(cells ** n):
            x = decode_config(code, cells, n)
            if int((x != center).sum()) <= r:
                inside += 1
        assert sl.hamming_ball_count(n, r, cells).count == inside


# --- entropy vs covering inequality ------------------------------------------


def test_entropy_covering_gap_holds_everywhere():
    instances = [
        sl.ProductMeasure(AB, np.array([0.5, 0.5]), 10),
        sl.ProductMeasure(AB, np.array([0.99, 0.01]), 200),
        mixture(300),
        sl.ConditionedMeasure(mixture(300), sl.CellBandEvent(P2, 0.2, 0.45)),
        sl.equipartition(AB, P2, 50, int(round(math.exp(0.3 * 50)))),
        sl.SparseMeasure(AB, np.array([[0, 1], [1, 0], [1, 1]]),
                         np.array([0.6, 0.3, 0.1])),
    ]
    for mu in instances:
        for eps in EPS_GRID_DEFAULT:
            gap = sl.entropy_covering_gap(mu, P2, eps)
            assert gap.holds, f"{type(mu).__name__} at eps={eps}"


def test_equipartition_rate_instance():
    # uniform on ~e^{hn} cells: both rates within O(1/n) of h
    h, n = 0.45, 400
    eq = sl.equipartition(AB, P2, n, int(round(math.exp(h * n))))
    assert abs(sl.shannon_entropy(eq, P2).normalized - h) <= 2 / n + 1e-9
    for eps in EPS_GRID_DEFAULT:
        rate = sl.covering_number(eq, P2, eps).log_count / n
        assert abs(rate - h) <= 2 / n + 1e-9

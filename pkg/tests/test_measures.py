import json
import math

import numpy as np
import pytest

import soficlab as sl
from soficlab.measures import (ExplicitEvent, cell_log_mass, decode_config,
                               encode_configs, measure_from_json,
                               pair_alphabet, product_window_distribution)

AB = sl.Alphabet(["0", "1"])
P2 = sl.Partition.singletons(AB)


def mixture_3():
    return sl.MixtureMeasure([0.5, 0.5], [
        sl.ProductMeasure(AB, np.array([0.9, 0.1]), 3),
        sl.ProductMeasure(AB, np.array([0.5, 0.5]), 3)])


def test_atom_mass_uniform_product():
    mu = sl.ProductMeasure(AB, np.array([0.5, 0.5]), 10)
    for x in (np.zeros(10, dtype=int), np.ones(10, dtype=int)):
        assert mu.atom_mass(x) == pytest.approx(2.0 ** -10, rel=1e-12)


def test_atom_mass_mixture_hand_value():
    # 1/2 * 0.9^3 + 1/2 * 0.5^3 = 0.427
    assert mixture_3().atom_mass(np.array([0, 0, 0])) == pytest.approx(0.427, abs=1e-12)


def test_atom_mass_point_mass():
    x0 = np.array([0, 1, 0])
    mu = sl.SparseMeasure(AB, x0, np.array([1.0]))
    assert mu.atom_mass(x0) == 1.0
    assert mu.atom_mass(np.array([1, 1, 0])) == 0.0


def test_cell_mass_product_counts():
    mu = sl.ProductMeasure(AB, np.array([0.7, 0.3]), 4)
    assert sl.cell_mass(mu, P2, counts=np.array([2, 2])) == pytest.approx(
        0.7 ** 2 * 0.3 ** 2, rel=1e-12)
    assert sl.cell_mass(mu, sl.Partition.trivial(AB), counts=np.array([4])) == 1.0


def test_cell_mass_mixture_singleton_cell_is_atom():
    mu = mixture_3()
    m = sl.cell_mass(mu, P2, sites=np.array([0, 0, 0]))
    assert m == pytest.approx(0.427, abs=1e-12)


def test_mixture_cell_mass_linearity():
    mu = mixture_3()
    for counts in ([3, 0], [2, 1], [1, 2], [0, 3]):
        parts = [sl.cell_mass(c, P2, counts=np.array(counts)) for c in mu.children]
        combined = sl.cell_mass(mu, P2, counts=np.array(counts))
        assert combined == pytest.approx(0.5 * parts[0] + 0.5 * parts[1], rel=1e-12)


def test_conditioning_identity_on_sparse():
    configs = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    probs = np.array([0.1, 0.2, 0.3, 0.4])
    mu = sl.SparseMeasure(AB, configs, probs)
    event = ExplicitEvent(lambda x: x[0] == 1, "first symbol is 1")
    nu = sl.ConditionedMeasure(mu, event)
    a = 0.7
    assert nu.atom_mass(np.array([1, 0])) == pytest.approx(0.3 / a, rel=1e-12)
    assert nu.atom_mass(np.array([1, 1])) == pytest.approx(0.4 / a, rel=1e-12)
    assert nu.atom_mass(np.array([0, 1])) == 0.0


def test_zero_mass_event_rejected():
    mu = sl.ProductMeasure(AB, np.array([1.0, 0.0]), 4)
    event = sl.CountVectorEvent(P2, lambda k: k[1] == 4, "all ones")
    with pytest.raises(ValueError):
        sl.ConditionedMeasure(mu, event)


def test_point_mass_sampling():
    x0 = np.array([1, 0, 1])
    mu = sl.SparseMeasure(AB, x0, np.array([1.0]))
    rng = np.random.default_rng(0)
    draw = mu.sample(rng, size=20)
    assert (draw == x0).all()


def test_product_sampling_concentrates():
    n, s = 1000, 2000
    mu = sl.ProductMeasure(AB, np.array([0.5, 0.5]), n)
    rng = np.random.default_rng(1)
    draw = mu.sample(rng, size=s)
    freq = draw.mean(axis=0)
    assert np.abs(freq - 0.5).max() < 0.05  # ~4.5 sigma of Binomial(s, 1/2)
    assert abs(freq.mean() - 0.5) < 0.01


def test_conditioned_sampling_support():
    base = sl.ProductMeasure(AB, np.array([0.5, 0.5]), 4)
    event = ExplicitEvent(lambda x: x[0] == 1, "first coordinate fixed")
    nu = sl.ConditionedMeasure(base, event)
    rng = np.random.default_rng(2)
    draw = nu.sample(rng, size=200)
    assert (draw[:, 0] == 1).all()
    assert 0.3 < draw[:, 1].mean() < 0.7


def test_rejection_budget_error():
    base = sl.ProductMeasure(AB, np.array([0.5, 0.5]), 4)
    nu = sl.ConditionedMeasure(base, ExplicitEvent(lambda x: False, "never"),
                               rejection_budget=500)
    with pytest.raises(sl.RejectionBudgetError):
        nu.sample(np.random.default_rng(0), size=1)


def test_rejection_falls_back_to_enumeration_for_tiny_events():
    # event mass 2^-12: rejection at a tight budget stalls, enumeration takes over
    base = sl.ProductMeasure(AB, np.array([0.5, 0.5]), 12)
    target = np.ones(12, dtype=int)
    nu = sl.ConditionedMeasure(
        base, ExplicitEvent(lambda x: bool((x == 1).all()), "all ones"),
        rejection_budget=64)
    draw = nu.sample(np.random.default_rng(1), size=5)
    assert (draw == target).all()


def test_mixture_sampling_reproducible():
    mu = mixture_3()
    a = mu.sample(np.random.default_rng(7), size=50)
    b = mu.sample(np.random.default_rng(7), size=50)
    assert (a == b).all()


# --- window marginals ------------------------------------------------------


def test_window_marginal_iid_injective():
    sigma = sl.cyclic_sofic(9)
    window = sl.ball(sl.integer_lattice(1), ["t"], 1)
    p = np.array([0.7, 0.3])
    mu = sl.ProductMeasure(AB, p, 9)
    wm = sl.window_marginal(mu, sigma, 4, window)
    assert sl.tv_distance(wm, sl.iid_window_target(p, window)) == 0.0


def test_window_marginal_diagonal_identification():
    # two window words hit the same vertex: support sits on the diagonal
    sigma = sl.cyclic_sofic(2)
    window = sl.ball(sl.integer_lattice(1), ["t"], 1)  # e, t, t^-1
    p = np.array([0.7, 0.3])
    mu = sl.ProductMeasure(AB, p, 2)
    wm = sl.window_marginal(mu, sigma, 0, window)
    for code, mass in enumerate(wm.table):
        cfg = decode_config(code, 2, 3)
        if cfg[1] != cfg[2]:
            assert mass == 0.0
        else:
            assert mass == pytest.approx(p[cfg[0]] * p[cfg[1]], rel=1e-12)


def test_window_marginal_mixture_linearity_and_monte_carlo():
    sigma = sl.cyclic_sofic(50)
    window = sl.ball(sl.integer_lattice(1), ["t"], 1)
    p, q = np.array([0.5, 0.5]), np.array([0.9, 0.1])
    mu = sl.MixtureMeasure([0.5, 0.5], [sl.ProductMeasure(AB, p, 50),
                                        sl.ProductMeasure(AB, q, 50)])
    wm = sl.window_marginal(mu, sigma, 3, window)
    expect = sl.mix_windows([0.5, 0.5], [sl.iid_window_target(p, window),
                                         sl.iid_window_target(q, window)])
    assert sl.tv_distance(wm, expect) < 1e-12

    n_samples = 10 ** 5
    draw = mu.sample(np.random.default_rng(3), size=n_samples)
    targets = np.array([3, 4, 2])  # images of e, t, t^-1 at v=3
    codes = encode_configs(draw[:, targets], 2)
    freq = np.bincount(codes, minlength=8) / n_samples
    sig = np.sqrt(wm.table * (1 - wm.table) / n_samples)
    assert (np.abs(freq - wm.table) <= 3 * sig + 5 / n_samples).all()


def test_window_marginal_exchangeable_conditioned_vs_bruteforce():
    n = 7
    mu = sl.ProductMeasure(AB, np.array([0.6, 0.4]), n)
    nu = sl.ConditionedMeasure(mu, sl.majority_event(P2, n))
    sigma = sl.cyclic_sofic(n)
    window = sl.ball(sl.integer_lattice(1), ["t"], 1)
    wm = sl.window_marginal(nu, sigma, 2, window)
    table = np.zeros(8)
    for code in range(2 ** n):
        x = decode_config(code, 2, n)
        m = nu.atom_mass(x)
        if m > 0:
            name = sl.pullback_name(sigma, x, 2, window)
            table[int(encode_configs(name, 2))] += m
    assert np.abs(wm.table - table).max() < 1e-13


def test_window_marginal_monte_carlo_mode_recorded():
    # explicit-event conditioning has no exact pushforward path
    base = sl.ProductMeasure(AB, np.array([0.5, 0.5]), 6)
    nu = sl.ConditionedMeasure(base, ExplicitEvent(lambda x: x[0] <= x[-1], "sorted ends"))
    sigma = sl.cyclic_sofic(6)
    window = sl.ball(sl.integer_lattice(1), ["t"], 1)
    wm = sl.window_marginal(nu, sigma, 0, window,
                            rng=np.random.default_rng(0), samples=2000)
    assert wm.mode == "monte_carlo"
    assert wm.sample_count == 2000


def test_uniform_on_cells_masses_and_marginal():
    part = sl.Partition.singletons(AB)
    cells = np.array([[0, 0, 0], [1, 1, 1]])
    mu = sl.UniformOnCells(AB, part, 3, cells=cells)
    assert mu.atom_mass(np.zeros(3, dtype=int)) == pytest.approx(0.5)
    assert mu.atom_mass(np.array([0, 1, 0])) == 0.0
    sigma = sl.cyclic_sofic(3)
    window = sl.ball(sl.integer_lattice(1), ["t"], 1)
    wm = sl.window_marginal(mu, sigma, 0, window)
    assert wm.table[0] == pytest.approx(0.5)
    assert wm.table[-1] == pytest.approx(0.5)


def test_fibre_product_atom_and_marginal():
    clean = sl.ProductMeasure(AB, np.array([0.8, 0.2]), 4)
    noise = sl.ProductMeasure(AB, np.array([0.5, 0.5]), 4)
    nu = sl.FibreProduct([clean, noise])
    x = np.array([0, 1, 0, 0, 1, 0, 0, 0])
    expected = clean.atom_mass(x[0::2]) * noise.atom_mass(x[1::2])
    assert nu.atom_mass(x) == pytest.approx(expected, rel=1e-12)
    assert nu.fibre_marginal(0) is clean


def test_fibre_product_window_marginal_is_product_over_fibres():
    # a rectangle window over the product approximation factorizes fibrewise
    p = np.array([0.7, 0.3])
    mu = sl.ProductMeasure(AB, p, 6)
    nu = sl.FibreProduct([mu, mu, mu])
    sigma = sl.product_sofic(sl.cyclic_sofic(6), sl.cyclic_sofic(3))
    window = sl.product_window(sl.ball(sl.integer_lattice(1), ["t"], 1),
                               sl.ball(sl.integer_lattice(1), ["t"], 0))
    wm = sl.window_marginal(nu, sigma, 0, window)
    assert sl.tv_distance(wm, sl.iid_window_target(p, window)) < 1e-12


# --- tv distance and pair tables ------------------------------------------


def test_tv_examples():
    a = sl.WindowDistribution(["e"], 2, np.array([0.7, 0.3]))
    b = sl.WindowDistribution(["e"], 2, np.array([0.5, 0.5]))
    assert sl.tv_distance(a, a) == 0.0
    assert sl.tv_distance(a, b) == pytest.approx(0.2, rel=1e-12)
    pm0 = sl.WindowDistribution(["e"], 2, np.array([1.0, 0.0]))
    pm1 = sl.WindowDistribution(["e"], 2, np.array([0.0, 1.0]))
    assert sl.tv_distance(pm0, pm1) == 1.0


def test_tv_window_mismatch():
    a = sl.WindowDistribution(["e"], 2, np.array([1.0, 0.0]))
    b = sl.WindowDistribution(["e", "t"], 2, np.array([1.0, 0.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        sl.tv_distance(a, b)


def test_pair_square_and_components_roundtrip():
    rng = np.random.default_rng(5)
    table = rng.random(8)
    table /= table.sum()
    d = sl.WindowDistribution(["e", "t", "t^-1"], 2, table)
    pair = d.pair_square()
    assert pair.alphabet_size == 4
    first, second = pair.pair_components()
    assert np.abs(first.table - table).max() < 1e-12
    assert np.abs(second.table - table).max() < 1e-12


# --- barycentre -------------------------------------------------------------


def window_dist(p):
    return sl.WindowDistribution(["e"], len(p), np.asarray(p, dtype=float))


def test_barycentre_point_mass_consistent():
    nu = window_dist([0.2, 0.5, 0.3])
    rep = sl.barycentre_check([(1.0, nu)])
    assert rep.is_point_mass_consistent
    rep2 = sl.barycentre_check([(0.4, nu), (0.6, window_dist([0.2, 0.5, 0.3]))])
    assert rep2.is_point_mass_consistent


def test_barycentre_two_atoms_inconsistent():
    rep = sl.barycentre_check([(0.5, window_dist([0.7, 0.3, 0.0])),
                               (0.5, window_dist([0.5, 0.5, 0.0]))])
    assert not rep.is_point_mass_consistent
    assert rep.max_cell_variance > 0


def test_barycentre_matches_variance_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        m = rng.integers(2, 6)
        w = rng.dirichlet(np.ones(m))
        tables = rng.dirichlet(np.ones(3), size=m)
        theta = [(w[i], window_dist(tables[i])) for i in range(m)]
        rep = sl.barycentre_check(theta)
        # oracle: per-cell variance of the atom masses
        var = max(float((w * tables[:, c] ** 2).sum() - (w @ tables[:, c]) ** 2)
                  for c in range(3))
        assert rep.is_point_mass_consistent == (var <= 1e-9)
        assert rep.max_cell_variance == pytest.approx(var, abs=1e-12)


# --- serialization and totals ----------------------------------------------


def test_measure_json_roundtrip():
    mu = mixture_3()
    j = json.dumps(mu.to_json())
    mu2 = measure_from_json(json.loads(j))
    x = np.array([0, 1, 0])
    assert mu2.atom_mass(x) == pytest.approx(mu.atom_mass(x), rel=1e-15)
    cond = sl.ConditionedMeasure(
        sl.ProductMeasure(AB, np.array([0.6, 0.4]), 5),
        sl.CellBandEvent(P2, 0.3, 1.2))
    cond2 = measure_from_json(json.loads(json.dumps(cond.to_json())))
    y = np.array([0, 0, 1, 0, 0])
    assert cond2.atom_mass(y) == pytest.approx(cond.atom_mass(y), rel=1e-12)


def test_total_mass_properties_random_trees():
    rng = np.random.default_rng(13)
    for _ in range(20):
        n = int(rng.integers(2, 7))
        k = int(rng.integers(2, 4))
        ab = sl.Alphabet([str(i) for i in range(k)])
        parts = sl.Partition.singletons(ab)
        children = [sl.ProductMeasure(ab, rng.dirichlet(np.ones(k)), n)
                    for _ in range(int(rng.integers(1, 4)))]
        w = rng.dirichlet(np.ones(len(children)))
        mu = sl.MixtureMeasure(w, children) if len(children) > 1 else children[0]
        total = sum(mu.atom_mass(decode_config(c, k, n)) for c in range(k ** n))
        assert total == pytest.approx(1.0, abs=1e-9)
        spec = sl.cell_spectrum(mu, parts)
        assert abs(spec.total_log_mass()) < 1e-9


def test_window_csv_rows():
    d = sl.WindowDistribution(["e", "t"], 2, np.array([0.5, 0.0, 0.25, 0.25]))
    rows = d.to_csv_rows(["0", "1"])
    assert ("0.0", 0.5) in rows
    assert all(mass > 0 for _, mass in rows)


def test_pair_alphabet_and_product_window_distribution():
    pa = pair_alphabet(AB)
    assert pa.size == 4
    d = product_window_distribution([np.array([0.7, 0.3])] * 2, ["e", "t"])
    assert d.table[0] == pytest.approx(0.49)

"""Empirical measures, Wasserstein axioms, equidistribution, correlation law."""

import numpy as np
import pytest

from anosovlab import measures as M
from anosovlab import systems as S
from anosovlab.errors import InvalidParams, Unsupported


def make(kind, **params):
    return S.make_system(S.SystemSpec(kind, params))


CAT = make("CatSuspension")


def pt(seed, system=CAT):
    return S.random_point(system, np.random.default_rng(seed))


def random_measure(gen, n=12):
    # dyadic weights: scaling by 0.5, 2, 10 is then exactly representable,
    # which is what makes the normalisation invariance exact
    weights = gen.integers(1, 32, n) / 16.0
    return M.EmpiricalMeasure.from_arrays(gen.uniform(-2.0, 2.0, n), weights)


# ---------------------------------------------------------------------------
# Wasserstein metric axioms


def test_wasserstein_identical_measures_zero():
    gen = np.random.default_rng(0)
    mu = random_measure(gen)
    assert M.wasserstein_1d(mu, mu) == 0.0


def test_wasserstein_normalisation_invariance():
    gen = np.random.default_rng(1)
    mu = random_measure(gen)
    for c in (0.5, 2.0, 10.0):
        scaled = M.EmpiricalMeasure.from_arrays(mu.positions, c * mu.weights)
        assert M.wasserstein_1d(mu, scaled) == 0.0


def test_wasserstein_symmetry_exact():
    gen = np.random.default_rng(2)
    for _ in range(50):
        a, b = random_measure(gen), random_measure(gen)
        assert M.wasserstein_1d(a, b) == M.wasserstein_1d(b, a)


def test_wasserstein_triangle_inequality():
    gen = np.random.default_rng(3)
    for _ in range(100):
        a, b, c = (random_measure(gen) for _ in range(3))
        assert M.wasserstein_1d(a, c) <= (
            M.wasserstein_1d(a, b) + M.wasserstein_1d(b, c) + 1e-12
        )


def test_wasserstein_dirac_pair():
    a = M.EmpiricalMeasure.from_arrays([0.0], [1.0])
    b = M.EmpiricalMeasure.from_arrays([0.45], [3.0])
    assert M.wasserstein_1d(a, b) == pytest.approx(0.45, abs=1e-15)


def test_empirical_measure_validation():
    with pytest.raises(InvalidParams):
        M.EmpiricalMeasure.from_arrays([0.0, 1.0], [1.0, -1.0])
    with pytest.raises(InvalidParams):
        M.EmpiricalMeasure.from_arrays([0.0], [0.0])


# ---------------------------------------------------------------------------
# leafwise empirical measures


def test_zero_length_window_single_atom():
    mu = M.empirical_leaf_measure(CAT, pt(4), 100, (0.3, 0.3), seed=1)
    assert len(mu.samples) == 1
    assert mu.total == 1.0


def test_leaf_measure_weights_uniform_for_volume_preserving_model():
    mu = M.empirical_leaf_measure(CAT, pt(5), 100000, (-0.2, 0.2), seed=2)
    w = mu.weights
    assert len(mu.samples) == 100000
    assert np.max(np.abs(w / w.mean() - 1.0)) <= 0.05


def test_disjoint_windows_total_additivity():
    x = pt(6)
    a = M.empirical_leaf_measure(CAT, x, 500, (-0.2, -0.1), seed=3, T_orbit=2e4)
    b = M.empirical_leaf_measure(CAT, x, 500, (0.1, 0.2), seed=3, T_orbit=2e4)
    assert a.support[1] < b.support[0]
    union = M.EmpiricalMeasure.from_arrays(
        np.concatenate([a.positions, b.positions]),
        np.concatenate([a.weights, b.weights]),
    )
    assert union.total == pytest.approx(a.total + b.total, rel=1e-12)


def test_leaf_measure_needs_quotient():
    asl = make("ASL2Model")
    with pytest.raises(Unsupported):
        M.empirical_leaf_measure(asl, S.origin(asl), 10, (0.0, 0.1))


# ---------------------------------------------------------------------------
# Birkhoff equidistribution


def test_constant_test_has_zero_discrepancy():
    tests = [t for t in M.equidistribution_tests(CAT) if t.name == "const"]
    rep = M.birkhoff_equidistribution(CAT, pt(7), tests, T=300.0, dt=0.5)
    assert all(d == 0.0 for _, d in rep.discrepancy_curve)


def test_birkhoff_averages_bounded_by_sup():
    tests = M.equidistribution_tests(CAT)
    rep = M.birkhoff_equidistribution(CAT, pt(8), tests, T=500.0, dt=0.5)
    for name, avg, ref in rep.test_values:
        assert abs(avg) <= 1.0 + 1e-12


def test_birkhoff_discrepancy_small_at_moderate_time():
    tests = M.equidistribution_tests(CAT)
    rep = M.birkhoff_equidistribution(CAT, pt(9), tests, T=4000.0, dt=0.5)
    assert rep.discrepancy_curve[-1][1] <= 0.05
    ts = [t for t, _ in rep.discrepancy_curve]
    assert ts == sorted(ts)


def test_birkhoff_unsupported_on_chart_local():
    asl = make("ASL2Model")
    with pytest.raises(Unsupported):
        M.birkhoff_equidistribution(asl, S.origin(asl), [], T=10.0)


def test_birkhoff_works_on_nil_quotient():
    bs = make("BorelSmale")
    tests = M.equidistribution_tests(bs)
    x = S.random_point(bs, np.random.default_rng(10))
    rep = M.birkhoff_equidistribution(bs, x, tests, T=500.0, dt=0.5)
    assert rep.discrepancy_curve[-1][1] <= 0.3


# ---------------------------------------------------------------------------
# correlation law along the fast leaf


def test_correlation_exact_matches_monte_carlo():
    phi = M.leafwise_test(CAT)
    x = pt(11)
    v_exact, se0 = M.correlation_decay(CAT, x, phi, 1.0, 3.0, method="exact")
    assert se0 == 0.0
    v_mc, se = M.correlation_decay(CAT, x, phi, 1.0, 3.0, n_u=40000, method="mc")
    assert abs(v_exact - v_mc) <= 4.0 * se


def test_correlation_equal_times_bounded():
    phi = M.leafwise_test(CAT, normalised=False)  # |phi| <= 1
    v, _ = M.correlation_decay(CAT, pt(12), phi, 2.0, 2.0, method="mc", n_u=2000)
    assert 0.0 <= v <= 4.0


def test_correlation_constant_test_vanishes():
    const = [t for t in M.equidistribution_tests(CAT) if t.name == "const"][0]
    x = pt(13)
    lam1 = CAT.model.rate_top
    y = S.lattice_reduce(CAT, S.unstable_shift(CAT, x, 0.37))
    f = const(CAT, y) - const(CAT, S.unstable_shift(CAT, y, 1.0))
    assert f == 0.0


def test_correlation_decay_fit():
    phi = M.leafwise_test(CAT)
    x = pt(14)
    gaps = np.arange(2.0, 21.0, 2.0)
    vals = [abs(M.correlation_decay(CAT, x, phi, 1.0, 1.0 + g)[0]) for g in gaps]
    ln = np.log(np.maximum(vals, 1e-300))
    slope, icpt = np.polyfit(gaps, ln, 1)
    pred = np.polyval([slope, icpt], gaps)
    r2 = 1.0 - np.sum((ln - pred) ** 2) / np.sum((ln - ln.mean()) ** 2)
    assert -slope > 0.0
    assert r2 >= 0.9


def test_correlation_envelope_dominated_by_zero_gap():
    phi = M.leafwise_test(CAT)
    x = pt(15)
    v0 = abs(M.correlation_decay(CAT, x, phi, 1.0, 1.0)[0])
    others = [abs(M.correlation_decay(CAT, x, phi, 1.0, 1.0 + g)[0]) for g in (4.0, 8.0, 12.0)]
    assert v0 >= max(others)


def test_lln_percentile_small_and_decreasing():
    phi = M.leafwise_test(CAT)
    x = pt(16)
    p_short = M.lln_average(CAT, x, phi, T=150.0, n_u=32, seed=5)
    p_long = M.lln_average(CAT, x, phi, T=600.0, n_u=32, seed=5)
    assert p_long <= 0.05
    assert p_long <= p_short

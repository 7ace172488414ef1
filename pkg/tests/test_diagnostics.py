import math

import numpy as np
import pytest

from rfikit import (AffineFeasibilityProblem, EmpiricalMeasure, FiniteFamily, GaussianNoise,
                    Halfspace, HistogramSpec, Identity, IndexSampler, LinearMap, OrbitEscape,
                    PointMass, TrajectoryLog, UniformBox, asymptotic_regularity_check,
                    baillon_bruck_bound, bounded_expectation_check, cesaro_convergence_check,
                    cesaro_distances, cesaro_pool, geometric_rate_fit, histogram_wasserstein,
                    pooled_distance, residual_histogram, run_chain, run_ensemble,
                    second_moment_trace, split_half_error, stochastic_douglas_rachford, wasserstein)


def deterministic(op, x0, K, N=1, **kw):
    return run_ensemble(PointMass(x0), N, K, IndexSampler(0), FiniteFamily([op]), **kw)


# --------------------------------------------------------------- rate fit

def test_rate_fit_on_exact_halving():
    hist = deterministic(LinearMap.scaling(1, 0.5), [8.0], 40)
    fit = geometric_rate_fit(hist, EmpiricalMeasure.dirac([0.0]))
    assert fit.fitted_rate == pytest.approx(0.5, rel=1e-9)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.window == (4, 40)


def test_rate_fit_identity_is_one():
    hist = deterministic(Identity(2), [3.0, 4.0], 20)
    fit = geometric_rate_fit(hist, EmpiricalMeasure.dirac([0.0, 0.0]), window=(0, 20))
    assert fit.fitted_rate == pytest.approx(1.0, abs=1e-12)


def test_rate_fit_shrinks_window_at_zero_distance():
    # halving for ten steps, then exactly on the reference
    snaps = [EmpiricalMeasure.dirac([2.0 ** -k]) for k in range(10)] + \
        [EmpiricalMeasure.dirac([0.0])] * 5
    fit = geometric_rate_fit(snaps, EmpiricalMeasure.dirac([0.0]), window=(0, 14))
    assert fit.window == (0, 9)
    assert "k=10" in fit.note
    assert fit.fitted_rate == pytest.approx(0.5, rel=1e-9)
    with pytest.raises(ValueError):
        geometric_rate_fit(snaps, EmpiricalMeasure.dirac([0.0]), window=(9, 14))


# ---------------------------------------------------------------- cesaro

def test_cesaro_identity_is_zero():
    hist = deterministic(Identity(1), [1.5], 40, N=3)
    assert all(d == 0.0 for _, d in cesaro_convergence_check(hist, [1, 5, 20]))


def test_cesaro_negation_decays_like_one_over_k():
    hist = deterministic(LinearMap.negation(1), [1.0], 400)
    pi = EmpiricalMeasure([[1.0], [-1.0]])
    for k, d in cesaro_distances(hist, pi):
        # odd k: one surplus atom at +1 out of k, so W1 = 1/k exactly
        assert d <= 1.0 / k + 1e-15
        assert d == (pytest.approx(1.0 / k) if k % 2 else 0.0)
    checks = cesaro_convergence_check(hist, [1, 3, 11, 101])
    assert [k for k, _ in checks] == [1, 3, 11, 101]
    assert all(d <= 1.0 / k + 1e-15 for k, d in checks)
    with pytest.raises(ValueError):
        cesaro_convergence_check(hist, [201])


def test_cesaro_stochastic_douglas_rachford():
    rng = np.random.default_rng(21)
    halves = [Halfspace(rng.normal(size=2), rng.normal()) for _ in range(2)]
    fam = stochastic_douglas_rachford(halves, halves[::-1])
    init = UniformBox([-2.0, -2.0], [2.0, 2.0])
    K = 40
    hist = run_ensemble(init, 50, 4 * K, IndexSampler(22), fam)
    checks = cesaro_convergence_check(hist, [5, 10, 20, K])
    d = np.array([v for _, v in checks])
    scale = float(np.mean(np.linalg.norm(hist[0].atoms, axis=1)))
    # monotone within a tenth of the state scale, and small at the end
    assert np.all(np.diff(d) <= 0.1 * scale)
    assert d[-1] <= 0.05 * scale
    # the long-run oracle: nu_K is already near nu_{4K}
    far = pooled_distance(cesaro_pool(hist, K), cesaro_pool(hist, 4 * K))
    assert far <= 0.05 * scale


# ---------------------------------------------------- asymptotic regularity

def test_baillon_bruck_bound_formula():
    assert baillon_bruck_bound(2.0, 1, 0.5) == pytest.approx(2.0 / math.sqrt(math.pi / 4))


def test_asymptotic_regularity_trivial_cases():
    recs = asymptotic_regularity_check(Identity(2), 0.3, [0.5, 0.5], 50, 1.0)
    assert all(r == 0.0 and b > 0 for _, r, b in recs)
    recs = asymptotic_regularity_check(LinearMap.negation(1), 0.5, [1.0], 50, 2.0)
    assert all(r == 0.0 for _, r, _ in recs)


def test_asymptotic_regularity_rotation():
    recs = asymptotic_regularity_check(LinearMap.rotation(math.pi / 2), 0.5, [1.0, 0.0],
                                       10_000, 2.0)
    assert len(recs) == 10_000
    assert all(r < b for _, r, b in recs)
    # relaxed rotation contracts by |(1 + i)/2| = 1/sqrt(2) per step: oracle
    m, r, _ = recs[9]
    assert r == pytest.approx(math.sqrt(2) * 2.0 ** (-10 / 2), rel=1e-12)


def test_orbit_escape():
    with pytest.raises(OrbitEscape) as info:
        asymptotic_regularity_check(LinearMap.translation([1.0]), 0.5, [0.0], 100, 3.0)
    # x_m = m/2 first exceeds 3 at m = 7
    assert [m for m, _, _ in info.value.records] == list(range(1, 7))
    with pytest.raises(ValueError):
        asymptotic_regularity_check(Identity(1), 1.0, [0.0], 5, 1.0)


# ------------------------------------------------------ bounded expectation

def test_bounded_expectation_examples():
    out = bounded_expectation_check(deterministic(Identity(2), [3.0, 4.0], 10), 5.0)
    assert out["sup_mean_norm"] == 5.0 and out["pass"]
    out = bounded_expectation_check(deterministic(LinearMap.scaling(2, 0.5), [1.0, 1.0], 10), 9)
    assert out["argmax_k"] == 0
    drift = deterministic(LinearMap.translation([1.0, 0.0]), [0.0, 0.0], 100)
    out = bounded_expectation_check(drift, 50.0)
    assert out["sup_mean_norm"] == 100.0 and out["argmax_k"] == 100 and not out["pass"]
    listed = bounded_expectation_check(list(drift), 200.0)
    assert listed["sup_mean_norm"] == 100.0 and listed["pass"]
    with pytest.raises(ValueError):
        bounded_expectation_check([], 1.0)


# ------------------------------------------------------------- histograms

def test_constant_trajectory_single_bin_at_zero():
    log = run_chain([1.0, 2.0], 50, IndexSampler(0), FiniteFamily([Identity(2)]))
    h = residual_histogram(log)
    assert h.counts.tolist() == [50]
    assert h.edges[0] <= 0.0 <= h.edges[-1]


def test_negation_single_bin_at_two():
    log = run_chain([1.0], 30, IndexSampler(0), FiniteFamily([LinearMap.negation(1)]))
    h = residual_histogram(log, spec=HistogramSpec("count", 1))
    assert h.counts.tolist() == [30]
    assert h.centers[0] == pytest.approx(2.0)


@pytest.mark.parametrize("spec", [HistogramSpec(), HistogramSpec("count", 7),
                                  HistogramSpec("width", 0.05)])
def test_histogram_counts_conserve_sample_size(spec):
    rng = np.random.default_rng(3)
    log = TrajectoryLog(rng.exponential(size=997), np.zeros(998))
    assert residual_histogram(log, spec=spec).counts.sum() == 997
    assert residual_histogram(log, (100, 400), spec).counts.sum() == 300


def test_histogram_errors():
    log = TrajectoryLog(np.ones(10), np.zeros(11))
    for w in ((5, 5), (0, 11), (-1, 3)):
        with pytest.raises(ValueError):
            residual_histogram(log, w)
    with pytest.raises(ValueError):
        residual_histogram(log, spec=HistogramSpec("sturges"))
    with pytest.raises(ValueError):
        histogram_wasserstein(residual_histogram(log, spec=HistogramSpec("count", 2)),
                              residual_histogram(log, spec=HistogramSpec("count", 3)))


def test_stationary_half_windows_agree():
    prob = AffineFeasibilityProblem.random(20, 30, seed=5, xi=GaussianNoise(1e-6),
                                           zeta=GaussianNoise(1e-6))
    log = run_chain(prob.row_space_point(10.0, 6), 4000, IndexSampler(5), prob.family())
    r = log.residuals
    # stationarity oracle: doubled run length, windows in the second half
    spec = HistogramSpec("fd", range=(float(r[1000:].min()), float(r[1000:].max())))
    h1 = residual_histogram(log, (1000, 2500), spec)
    h2 = residual_histogram(log, (2500, 4000), spec)
    assert histogram_wasserstein(h1, h2) <= 0.05 * np.median(r[1000:])


# ----------------------------------------------------- second moment & N

def test_second_moment_trace_matches_direct_computation():
    hist = run_ensemble(UniformBox([-1.0, -1.0], [1.0, 1.0]), 400, 3, IndexSampler(4),
                        FiniteFamily([LinearMap.scaling(2, 0.5)]))
    ks, means, ses = second_moment_trace(hist, [0.0, 0.0])
    assert ks.tolist() == [0, 1, 2, 3]
    sq = np.sum(hist[0].atoms ** 2, axis=1)
    assert means[0] == pytest.approx(sq.mean())
    assert ses[0] == pytest.approx(sq.std(ddof=1) / 20.0)
    np.testing.assert_allclose(means[1:], means[0] * 0.25 ** np.arange(1, 4), rtol=1e-12)
    # uniform on the square: E||X||^2 = 2/3
    assert abs(means[0] - 2 / 3) < 4 * ses[0]


def test_split_half_error():
    assert split_half_error(EmpiricalMeasure(np.zeros((10, 2)))) == 0.0
    rng = np.random.default_rng(8)
    small = split_half_error(EmpiricalMeasure(rng.normal(size=(40, 2))))
    large = split_half_error(EmpiricalMeasure(rng.normal(size=(1600, 2))))
    assert large < small
    halves = EmpiricalMeasure(np.array([[0.0]] * 3 + [[1.0]] * 3))
    assert split_half_error(halves, 1) == wasserstein(
        EmpiricalMeasure.dirac([0.0]), EmpiricalMeasure.dirac([1.0]), 1).value
    with pytest.raises(ValueError):
        split_half_error(EmpiricalMeasure([[0.0], [1.0]], [0.3, 0.7]))

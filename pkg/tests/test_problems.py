import numpy as np
import pytest

from oracles import cyclic_projections
from rfikit import (AffineFeasibilityProblem, BallNoise, ConstantNoise, FiniteFamily,
                    GaussianNoise, IndexSampler, LinearMap, NoisyHyperplaneFamily,
                    NoisySgdProblem, NoNoise, UniformNoise, averaged_slack,
                    contraction_rate_estimate, cyclic_sweep, estimate_c, estimate_d,
                    noisy_projection, run_chain, second_moment_matrix, sgd_step,
                    stochastic_douglas_rachford, stochastic_forward_backward)
from rfikit import GradStep, Halfspace, ProxIndicator, ProxL1, Ball


# ------------------------------------------------------------- noise specs

@pytest.mark.parametrize("spec,dim", [(GaussianNoise(2.0), 3), (UniformNoise(0.5), 2),
                                      (BallNoise(1.5), 2), (BallNoise(1.0), 4)])
def test_noise_specs_are_centered(spec, dim):
    S = spec.sample(40_000, dim, 1)
    se = S.std(axis=0) / np.sqrt(S.shape[0])
    assert np.all(np.abs(S.mean(axis=0)) < 4 * se)


def test_noise_supports():
    assert np.all(np.linalg.norm(BallNoise(0.7).sample(5000, 3, 2), axis=1) <= 0.7)
    assert np.all(np.abs(UniformNoise(0.3).sample(5000, 2, 3)) <= 0.3)
    np.testing.assert_allclose(UniformNoise(0.3).sample(200_000, 2, 4).var(axis=0).sum(),
                               UniformNoise(0.3).variance(2), rtol=0.02)
    assert np.all(ConstantNoise(2.0).sample(3, 2, 0) == 2.0)
    assert np.all(NoNoise().sample(3, 2, 0) == 0.0)


# ------------------------------------------------------- noisy projection

def test_noisy_projection_examples():
    fam = NoisyHyperplaneFamily([1.0, 2.0], [1.0, 0.0])
    x = np.array([3.0, 4.0])
    y = noisy_projection(fam, x, (np.zeros(2), 0.0))
    assert y @ [1.0, 2.0] == pytest.approx(1.0, abs=1e-14)
    flat = NoisyHyperplaneFamily([1.0, 0.0], [0.0, 0.0])
    np.testing.assert_allclose(noisy_projection(flat, x, (0.0, 0.1)), [0.1, 4.0], atol=1e-15)
    on = np.array([0.1, -7.0])
    np.testing.assert_array_equal(noisy_projection(flat, on, (0.0, 0.1)), on)
    with pytest.raises(ValueError):
        noisy_projection(flat, x, (np.array([-1.0, 0.0]), 0.0))


def test_noisy_projection_lands_on_sampled_hyperplane():
    fam = NoisyHyperplaneFamily([1.0, -2.0, 0.5], [0.3, 0.0, 1.0], GaussianNoise(0.5),
                                UniformNoise(0.4))
    rng = np.random.default_rng(0)
    U = IndexSampler(1).uniforms(np.arange(2000), 0, fam.draw_width)
    xi, zeta = fam.draws(U)
    X = rng.normal(size=(2000, 3)) * 10
    Y, bad = fam.project(X, xi, zeta)
    assert not bad.any()
    N = fam.a + xi
    lhs = np.sum(N * (Y - fam.xbar), axis=1)
    scale = np.maximum(1.0, np.abs(N).sum(axis=1) * np.abs(Y - fam.xbar).max(axis=1))
    assert np.all(np.abs(lhs - zeta) <= 1e-10 * scale)


def test_each_noisy_projection_is_half_averaged():
    fam = NoisyHyperplaneFamily([0.5, 1.0], [1.0, 1.0], BallNoise(0.4), UniformNoise(0.3))
    rng = np.random.default_rng(1)
    U = IndexSampler(2).uniforms(np.arange(300), 0, fam.draw_width)
    for u in U:
        op = fam.realize(u)
        X, Y = rng.normal(size=(50, 2)) * 5, rng.normal(size=(50, 2)) * 5
        slack, tol = averaged_slack(op, 0.5, X, Y)
        assert np.all(slack >= -tol)


def test_zero_normal_is_rejected():
    with pytest.raises(ValueError):
        NoisyHyperplaneFamily([0.0, 0.0], [1.0, 1.0])


# ------------------------------------------------------------ cyclic sweep

def test_anchors_satisfy_rows():
    prob = AffineFeasibilityProblem.random(8, 12, seed=3)
    np.testing.assert_allclose(np.sum(prob.A * prob.anchors, axis=1), prob.b, atol=1e-12)
    with pytest.raises(ValueError):
        AffineFeasibilityProblem(prob.A, prob.b, anchors=prob.anchors + 1.0)


def test_zero_noise_sweeps_match_plain_loop_bit_for_bit():
    prob = AffineFeasibilityProblem.random(5, 7, seed=4)
    x0 = np.random.default_rng(5).normal(size=7) * 3
    log = run_chain(x0, 30, IndexSampler(0), prob.family())
    expected = x0.copy()
    for k in range(30):
        for a, xb in zip(prob.A, prob.anchors):
            expected = expected - (np.sum(a * (expected - xb)) - 0.0) / np.sum(a * a) * a
        assert log.points[k + 1].tobytes() == expected.tobytes()


def test_zero_noise_sweeps_converge_to_projection_of_start():
    prob = AffineFeasibilityProblem.random(6, 10, seed=6)
    x0 = np.random.default_rng(7).normal(size=10)
    log = run_chain(x0, 3000, IndexSampler(0), prob.family())
    # limit: projection of x0 onto the solution set
    pinv = np.linalg.pinv(prob.A)
    target = x0 - pinv @ (prob.A @ x0 - prob.b)
    np.testing.assert_allclose(log.points[-1], target, atol=1e-8)
    np.testing.assert_allclose(cyclic_projections(prob.A, prob.b, x0, 3000), target, atol=1e-8)


def test_single_row_sweep_is_a_projection():
    prob = AffineFeasibilityProblem([[1.0, 2.0]], [1.0])
    x = np.array([3.0, -1.0])
    draw = (np.array([0.1, 0.0]), 0.05)
    np.testing.assert_array_equal(cyclic_sweep(prob, x, [draw]),
                                  noisy_projection(prob.rows[0], x, draw))


def test_noisy_sweeps_plateau():
    prob = AffineFeasibilityProblem.random(50, 60, seed=8, xi=GaussianNoise(1e-8),
                                           zeta=GaussianNoise(1e-8))
    x0 = prob.row_space_point(10.0, 9)
    log = run_chain(x0, 1500, IndexSampler(10), prob.family())
    r = log.residuals
    late = np.median(r[1000:])
    assert r[0] / late > 1e6
    assert 0.5 < np.median(r[1000:1250]) / np.median(r[1250:1500]) < 2.0


def test_random_row_order_projects_onto_some_row():
    prob = AffineFeasibilityProblem.random(4, 6, seed=11, order="random")
    fam = prob.family()
    log = run_chain(np.ones(6) * 5, 20, IndexSampler(12), fam)
    for x in log.points[1:]:
        assert np.min(np.abs(prob.A @ x - prob.b)) < 1e-10


# --------------------------------------------------------------- constants

def test_estimate_c_noiseless_cases():
    fam2 = NoisyHyperplaneFamily([1.0, 0.0], [0.0, 0.0])
    assert estimate_c(fam2, 1000, 10, 0) < 1e-5
    fam1 = NoisyHyperplaneFamily([1.0], [0.0])
    assert estimate_c(fam1, 10, 10, 0) == 1.0


def test_estimate_c_matches_eigenvalue_oracle():
    # oracle: smallest eigenvalue of E[u u^T] from independent numpy draws
    fam = NoisyHyperplaneFamily([1.0, 0.0], [0.0, 0.0], GaussianNoise(0.8))
    rng = np.random.default_rng(99)
    N = np.array([1.0, 0.0]) + 0.8 * rng.standard_normal((1_000_000, 2))
    U = N / np.linalg.norm(N, axis=1, keepdims=True)
    oracle = np.linalg.eigvalsh(U.T @ U / U.shape[0])[0]
    est = estimate_c(fam, 2000, 1_000_000, 3)
    assert est == pytest.approx(oracle, rel=0.05)
    assert np.linalg.eigvalsh(second_moment_matrix(fam, 200_000, 4))[0] == \
        pytest.approx(oracle, rel=0.05)


def test_estimate_d_examples():
    fam = NoisyHyperplaneFamily([0.6, 0.8], [3.0, 1.0], GaussianNoise(0.2),
                                ConstantNoise(-(0.6 * 3 + 0.8)))
    assert estimate_d(fam, 1000, 0) == 0.0
    plain = NoisyHyperplaneFamily([0.6, 0.8], [3.0, 1.0])
    assert estimate_d(plain, 100, 0) == pytest.approx(plain.b ** 2)
    # 1/||a + xi||^2 needs dimension > 4 for finite variance under Gaussian xi
    noisy = NoisyHyperplaneFamily([0.6, 0.8, 0, 0, 0], [3.0, 1.0, 0, 0, 0], GaussianNoise(0.3),
                                  UniformNoise(0.5))
    a, b = estimate_d(noisy, 1_000_000, 1), estimate_d(noisy, 1_000_000, 2)
    assert abs(a - b) / a < 0.02


def test_contraction_rate_examples():
    half = FiniteFamily([LinearMap.scaling(2, 0.5)])
    assert contraction_rate_estimate(half, IndexSampler(0), 10, 5) == pytest.approx(0.5, abs=1e-15)
    neg = FiniteFamily([LinearMap.negation(3)])
    assert contraction_rate_estimate(neg, IndexSampler(0), 10, 5) == pytest.approx(1.0, abs=1e-15)
    fam = NoisyHyperplaneFamily([1.0, 0.0], [0.0, 0.0], BallNoise(0.5), UniformNoise(0.2))
    c = estimate_c(fam, 360, 200_000, 5)
    r = contraction_rate_estimate(fam, IndexSampler(6), 400, 20_000, seed=7)
    assert r ** 2 == pytest.approx(1.0 - c, abs=0.01)


# -------------------------------------------------------------------- SGD

def test_sgd_step_examples():
    Q = np.diag([1.0, 2.0])
    prob = NoisySgdProblem(Q, NoNoise(), 0.25)
    np.testing.assert_array_equal(sgd_step(prob, [4.0, 4.0], [0.0, 0.0]), [3.0, 2.0])
    # Q = I: t = 1 sits exactly on the admissible edge min{1/L, 1/tau, tau/L^2} = 1
    unit = NoisySgdProblem(np.eye(2), NoNoise(), 1.0)
    assert not unit.outside_theory
    np.testing.assert_array_equal(sgd_step(unit, [3.0, -1.0], [0.0, 0.0]), [0.0, 0.0])
    wild = NoisySgdProblem(Q, NoNoise(), 0.4, allow_outside_theory=True)
    assert wild.outside_theory
    with pytest.raises(ValueError):
        NoisySgdProblem(Q, NoNoise(), 0.4)


def test_sgd_constants():
    prob = NoisySgdProblem(np.diag([1.0, 2.0]), UniformNoise(1.0), 0.25)
    assert (prob.L, prob.tau) == (2.0, 1.0)
    assert prob.max_step == 0.25
    assert prob.pbar == 0.0
    np.testing.assert_array_equal(prob.minimizer, [0.0, 0.0])
    shifted = NoisySgdProblem(np.diag([2.0, 2.0]), ConstantNoise(1.0), 0.1)
    np.testing.assert_allclose(shifted.minimizer, [-0.5, -0.5])
    assert shifted.pbar == pytest.approx(-0.5)


def test_sgd_step_from_origin_is_centered():
    prob = NoisySgdProblem(np.diag([1.0, 2.0]), UniformNoise(1.0), 0.25)
    fam = prob.family()
    U = IndexSampler(3).uniforms(np.arange(100_000), 0, fam.draw_width)
    Y, _ = fam.step(np.zeros((100_000, 2)), U)
    se = Y.std(axis=0, ddof=1) / np.sqrt(Y.shape[0])
    assert np.all(np.abs(Y.mean(axis=0)) <= 3 * se)


# ------------------------------------------------------ splitting families

def test_stochastic_splitting_families():
    grads = [GradStep.quadratic(np.diag([2.0, 1.0]), [1.0, 0.0], 0.5),
             GradStep.quadratic(np.eye(2), [0.0, -1.0], 0.5)]
    fb = stochastic_forward_backward([ProxL1(2, 0.5)], grads)
    assert len(fb.ops) == 2
    np.testing.assert_allclose(fb.distribution.probabilities, [0.5, 0.5])
    assert fb.regularity.constant == pytest.approx(2.0 / 3.0)
    dr = stochastic_douglas_rachford([ProxIndicator(Ball([0.0, 0.0], 1.0))],
                                     [ProxIndicator(Halfspace([1.0, 0.0], 0.2)),
                                      ProxIndicator(Halfspace([0.0, 1.0], -0.1))], None, [1, 3])
    np.testing.assert_allclose(dr.distribution.probabilities, [0.25, 0.75])
    assert dr.regularity.constant == 0.5

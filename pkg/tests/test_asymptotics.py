import numpy as np
import pytest

from mfgfinite import solve_mfg
from mfgfinite.asymptotics import (big_lambda, clt_coefficients, evolve_fluctuation_law,
                                   iid_initial_covariance, jump_covariance, local_rate, psi,
                                   rate_from_gamma, rate_functional, sample_fluctuation_paths,
                                   sigma_sqrt)
from mfgfinite.errors import InputError
from mfgfinite.master import MasterEvaluator
from mfgfinite.mfg import MeasureFlow, TimeGrid


def random_generator(rng, d, lo=0.5, hi=1.5):
    g = rng.uniform(lo, hi, (d, d))
    np.fill_diagonal(g, 0.0)
    np.fill_diagonal(g, -g.sum(axis=1))
    return g


@pytest.fixture(scope="module")
def ev_own(own):
    return MasterEvaluator(own, dt=1e-2)


def test_drift_vanishes_for_m_independent_costs(state_cost):
    ev = MasterEvaluator(state_cost, dt=1e-2)
    drift, _ = clt_coefficients(state_cost, ev, 0.3, [0.6, 0.4], [0.1, -0.1])
    U, _ = ev.evaluate(0.3, [0.6, 0.4])
    gamma = state_cost.rate_matrix(U)
    # only the transport part Gamma^T mu remains
    np.testing.assert_allclose(drift, gamma.T @ np.array([0.1, -0.1]), atol=1e-14)


def test_sigma2_symmetric_example():
    a = 0.8
    g = np.array([[-a, a], [a, -a]])
    np.testing.assert_allclose(jump_covariance(g, [0.5, 0.5]), [[a, -a], [-a, a]])


def test_drift_is_linear(own, ev_own):
    m = [0.6, 0.4]
    mu1, mu2 = np.array([0.3, -0.3]), np.array([-0.1, 0.1])
    b1, _ = clt_coefficients(own, ev_own, 0.2, m, mu1)
    b2, _ = clt_coefficients(own, ev_own, 0.2, m, mu2)
    b3, _ = clt_coefficients(own, ev_own, 0.2, m, 2 * mu1 - 3 * mu2)
    np.testing.assert_allclose(b3, 2 * b1 - 3 * b2, atol=1e-14)


def test_drift_matches_flow_derivative(own):
    # A mu is the derivative of m -> Gamma(t, m)^T m along mu
    ev = MasterEvaluator(own, dt=1e-3)
    m, mu, eps = np.array([0.6, 0.4]), np.array([1.0, -1.0]), 1e-5
    drift, _ = clt_coefficients(own, ev, 0.5, m, mu)

    def flow(mm):
        U, _ = ev.evaluate(0.5, mm)
        return own.rate_matrix(U).T @ mm

    fd = (flow(m + eps * mu) - flow(m - eps * mu)) / (2 * eps)
    np.testing.assert_allclose(drift, fd, atol=1e-6)


def test_sigma_sqrt_examples(rng):
    np.testing.assert_array_equal(sigma_sqrt(np.zeros((3, 3))), 0.0)
    a = 0.7
    root = sigma_sqrt(np.array([[a, -a], [-a, a]]))
    np.testing.assert_allclose(root, np.sqrt(a / 2) * np.array([[1, -1], [-1, 1]]), atol=1e-15)
    s2 = jump_covariance(random_generator(rng, 3), rng.dirichlet(np.ones(3)))
    r = sigma_sqrt(s2)
    np.testing.assert_allclose(r @ r, s2, atol=1e-10)
    with pytest.raises(InputError):
        sigma_sqrt(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_sigma2_along_zero_cost_flow(zero):
    law = evolve_fluctuation_law(zero, [0.5, 0.5], np.zeros((2, 2)), dt=1e-2)
    # uniform measure, all rates a = 1: sigma^2 = [[1, -1], [-1, 1]] at every time
    np.testing.assert_allclose(law.sigma2, np.tile([[1.0, -1.0], [-1.0, 1.0]], (51, 1, 1)),
                               atol=1e-12)
    np.testing.assert_allclose(law.drift, np.tile([[-1.0, 1.0], [1.0, -1.0]], (51, 1, 1)),
                               atol=1e-12)


def test_covariance_law_structure(own3):
    m0 = np.array([0.5, 0.3, 0.2])
    law = evolve_fluctuation_law(own3, m0, iid_initial_covariance(m0), dt=1e-2)
    cov = law.cov
    np.testing.assert_allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-14)
    np.testing.assert_allclose(cov.sum(axis=2), 0.0, atol=1e-8)
    assert np.linalg.eigvalsh(cov).min() >= -1e-10


def test_iid_initial_covariance():
    m0 = np.array([0.2, 0.5, 0.3])
    c = iid_initial_covariance(m0)
    np.testing.assert_allclose(c, np.diag(m0) - np.outer(m0, m0))
    np.testing.assert_allclose(c.sum(axis=1), 0.0, atol=1e-15)


def test_euler_paths_reproduce_covariance(own):
    law = evolve_fluctuation_law(own, [0.7, 0.3], np.zeros((2, 2)), dt=1e-3)
    paths = sample_fluctuation_paths(law, 20000, 3)
    mc = np.cov(paths[-1].T)
    assert np.linalg.norm(mc - law.cov[-1]) / np.linalg.norm(law.cov[-1]) <= 0.05


def test_local_rate_values():
    assert local_rate(1.0) == 0.0
    assert local_rate(0.0) == 1.0
    assert local_rate(np.e) == pytest.approx(1.0, abs=1e-15)
    assert local_rate(-0.1) == np.inf


def test_zero_cost_at_kfp_drift(rng):
    g = random_generator(rng, 3)
    m = rng.dirichlet(np.ones(3))
    r = rate_from_gamma(g, m, g.T @ m)
    assert r.big_lambda == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(r.theta_opt, 0.0, atol=1e-12)
    off = ~np.eye(3, dtype=bool)
    np.testing.assert_allclose(r.q_opt[off], (m[:, None] * g)[off], atol=1e-14)


def test_stationary_velocity():
    g = np.array([[-1.0, 0.6, 0.4], [0.6, -1.2, 0.6], [0.4, 0.6, -1.0]])
    m = np.full(3, 1 / 3)
    assert rate_from_gamma(g, m, np.zeros(3)).big_lambda == pytest.approx(0.0, abs=1e-14)
    g2 = np.array([[-1.0, 1.0, 0.0], [0.2, -0.4, 0.2], [0.5, 0.5, -1.0]])
    r = rate_from_gamma(g2, m, np.zeros(3))
    assert r.big_lambda > 1e-3
    assert r.duality_gap <= 1e-10


def test_matches_primal_flux_minimisation(frozen):
    for case in frozen["ldp_primal"]:
        r = rate_from_gamma(np.array(case["gamma"]), np.array(case["m"]), np.array(case["mu"]))
        assert r.big_lambda == pytest.approx(case["Lambda"], abs=1e-4)
        assert r.duality_gap <= 1e-6
        assert r.feasibility <= 1e-8


def test_psi_at_zero(rng):
    assert psi(random_generator(rng, 3), rng.dirichlet(np.ones(3)), np.zeros(3)) == 0.0


def test_non_tangent_velocity_costs_infinity(rng):
    r = rate_from_gamma(random_generator(rng, 2), [0.5, 0.5], [0.1, 0.1])
    assert r.big_lambda == np.inf


def test_big_lambda_uses_master_rates(own, ev_own):
    r = big_lambda(own, ev_own, 0.5, [0.6, 0.4], [0.05, -0.05])
    U, _ = ev_own.evaluate(0.5, [0.6, 0.4])
    direct = rate_from_gamma(own.rate_matrix(U), [0.6, 0.4], [0.05, -0.05])
    assert r.big_lambda == direct.big_lambda


def test_rate_functional(own):
    sol = solve_mfg(own, 0.0, [0.7, 0.3], dt=1e-2)
    ev = MasterEvaluator(own, dt=1e-2)
    assert rate_functional(own, ev, sol.m, [0.7, 0.3]) <= 1e-4
    grid = TimeGrid(0.0, 1.0, 20)
    const = MeasureFlow(grid, np.tile([0.7, 0.3], (21, 1)))
    assert rate_functional(own, ev, const, [0.7, 0.3]) > 1e-3
    assert rate_functional(own, ev, const, [0.6, 0.4]) == np.inf

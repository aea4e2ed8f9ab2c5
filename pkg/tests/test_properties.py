from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mfgfinite import QuadraticModel, SimplexGrid
from mfgfinite.asymptotics import jump_covariance, rate_from_gamma
from mfgfinite.errors import InputError
from mfgfinite.model import simplex_point, tangent_vector
from mfgfinite.sim import wasserstein_gap

MODELS = {d: QuadraticModel(d=d) for d in (2, 3, 4)}
dims = st.sampled_from([2, 3, 4])
moments = st.floats(-20.0, 20.0, allow_nan=False)
seeds = st.integers(0, 2**32 - 1)


def simplex(seed, d, floor=0.0):
    m = np.random.default_rng(seed).dirichlet(np.ones(d))
    return (m + floor) / (1 + d * floor)


def generator(seed, d, lo=0.2, hi=2.0):
    g = np.random.default_rng(seed).uniform(lo, hi, (d, d))
    np.fill_diagonal(g, 0.0)
    np.fill_diagonal(g, -g.sum(axis=1))
    return g


def tangent(seed, d, scale=0.5):
    v = np.random.default_rng(seed).normal(size=d)
    return scale * (v - v.mean())


@given(dims, st.data())
def test_optimal_control_stays_in_box(d, data):
    spec = MODELS[d]
    p = data.draw(hnp.arrays(float, d, elements=moments))
    alpha = spec.alpha_star(0, p)
    assert np.all(alpha >= spec.kappa) and np.all(alpha <= spec.M_bound)


@given(dims, st.data())
def test_optimal_control_lipschitz(d, data):
    spec = MODELS[d]
    p = data.draw(hnp.arrays(float, d, elements=moments))
    q = data.draw(hnp.arrays(float, d, elements=moments))
    gap = np.max(np.abs(spec.alpha_star(0, p) - spec.alpha_star(0, q)))
    assert gap <= np.max(np.abs(p - q)) / (2 * spec.b_coef) + 1e-9


@given(dims, st.data())
def test_rate_matrix_rows_sum_to_zero(d, data):
    u = data.draw(hnp.arrays(float, d, elements=st.floats(-5, 5)))
    gamma = MODELS[d].rate_matrix(u)
    np.testing.assert_allclose(gamma.sum(axis=1), 0.0, atol=1e-12)
    off = ~np.eye(d, dtype=bool)
    assert np.all(gamma[off] >= MODELS[d].kappa)


@given(dims, seeds, seeds)
def test_jump_covariance_structure(d, s1, s2):
    s2m = jump_covariance(generator(s1, d), simplex(s2, d))
    np.testing.assert_allclose(s2m, s2m.T, atol=1e-14)
    np.testing.assert_allclose(s2m.sum(axis=1), 0.0, atol=1e-12)
    off = ~np.eye(d, dtype=bool)
    assert np.all(s2m[off] <= 0)
    assert np.linalg.eigvalsh(s2m).min() >= -1e-12


@settings(deadline=None)
@given(st.sampled_from([2, 3]), seeds, seeds, seeds)
def test_rate_duality_and_sign(d, s1, s2, s3):
    r = rate_from_gamma(generator(s1, d), simplex(s2, d, 0.05), tangent(s3, d))
    assert r.duality_gap <= 1e-6
    assert r.feasibility <= 1e-8
    assert r.big_lambda >= 0


@settings(deadline=None)
@given(st.sampled_from([2, 3]), seeds, seeds, seeds, seeds)
def test_rate_convex_in_velocity(d, s1, s2, s3, s4):
    g, m = generator(s1, d), simplex(s2, d, 0.05)
    a, b = tangent(s3, d), tangent(s4, d)
    mid = rate_from_gamma(g, m, 0.5 * (a + b)).big_lambda
    ends = 0.5 * (rate_from_gamma(g, m, a).big_lambda + rate_from_gamma(g, m, b).big_lambda)
    assert mid <= ends + 1e-9


@given(dims, seeds, seeds, seeds)
def test_wasserstein_metric(d, s1, s2, s3):
    x, y, z = simplex(s1, d), simplex(s2, d), simplex(s3, d)
    assert wasserstein_gap(x, y) == pytest.approx(wasserstein_gap(y, x), abs=1e-15)
    assert wasserstein_gap(x, z) <= wasserstein_gap(x, y) + wasserstein_gap(y, z) + 1e-12
    assert wasserstein_gap(x, x) == 0.0


@given(st.integers(2, 4), st.integers(1, 12))
def test_simplex_grid_size(d, n):
    g = SimplexGrid(d, n)
    assert g.size == comb(n + d - 1, d - 1)
    np.testing.assert_array_equal(g.counts.sum(axis=1), n)


@given(dims, seeds, st.floats(1e-6, 1.0))
def test_simplex_validation(d, seed, eps):
    m = simplex(seed, d)
    np.testing.assert_array_equal(simplex_point(m), m)
    with pytest.raises(InputError):
        simplex_point(m * (1 + eps))
    mu = tangent(seed, d)
    tangent_vector(mu)
    with pytest.raises(InputError):
        tangent_vector(mu + eps)

import numpy as np
import pytest

from mfgfinite import TimeGrid, solve_mfg
from mfgfinite.errors import InputError
from mfgfinite.master import (MasterEvaluator, SimplexGrid, build_master_field,
                              composition_count, derivative_along_flow,
                              finite_difference_derivative, master_residual, regularity_probe,
                              solve_linearized)


@pytest.fixture(scope="module")
def field10(own):
    return build_master_field(own, SimplexGrid(2, 10), TimeGrid(0.0, 1.0, 4), dt=2e-3)


@pytest.fixture(scope="module")
def field_state(state_cost):
    return build_master_field(state_cost, SimplexGrid(2, 6), TimeGrid(0.0, 1.0, 4), dt=1e-3)


def test_simplex_grid_counts():
    for d, n in [(2, 5), (3, 4), (4, 3)]:
        g = SimplexGrid(d, n)
        assert g.size == composition_count(n, d)
        np.testing.assert_allclose(g.nodes.sum(axis=1), 1.0)
        assert g.nodes.min() >= 0
        assert all(g.rank(c) == k for k, c in enumerate(g.counts))
    g = SimplexGrid(3, 4)
    shift = g.shift_table()
    k = g.rank([1, 2, 1])
    assert tuple(g.counts[shift[k, 0, 1]]) == (2, 1, 1)
    assert shift[g.rank([4, 0, 0]), 0, 1] == -1


def test_lin_zero_direction(own, mfg_07):
    lin = solve_linearized(own, mfg_07, np.zeros(2))
    assert np.max(np.abs(lin.v)) == 0.0 and np.max(np.abs(lin.mu)) == 0.0


def test_lin_m_independent_costs(state_cost):
    base = solve_mfg(state_cost, 0.0, [0.7, 0.3])
    mu0 = np.array([0.2, -0.2])
    lin = solve_linearized(state_cost, base, mu0)
    assert np.max(np.abs(lin.v)) <= 1e-14
    # mu solves the KFP linearised in m alone: compare with the (linear) KFP difference
    from mfgfinite.mfg import solve_kfp_forward
    other = solve_kfp_forward(state_cost, base.u, base.m.m[0] + mu0)
    np.testing.assert_allclose(lin.mu, other.m - base.m.m, atol=1e-12)


def test_lin_difference_quotient(own, mfg_07):
    mu0 = np.array([1.0, -1.0])
    eps = 1e-4
    lin = solve_linearized(own, mfg_07, mu0)
    bumped = solve_mfg(own, 0.0, mfg_07.m.m[0] + eps * mu0, tol=1e-13)
    dq = (bumped.u.u[0] - mfg_07.u.u[0]) / eps
    assert np.max(np.abs(lin.v[0] - dq)) <= 1e-3


def test_lin_linearity_and_methods(own, mfg_07):
    a, b = np.array([1.0, -1.0]), np.array([-0.3, 0.3])
    la, lb = solve_linearized(own, mfg_07, a), solve_linearized(own, mfg_07, b)
    lc = solve_linearized(own, mfg_07, 2.0 * a - 0.5 * b)
    np.testing.assert_allclose(lc.v, 2 * la.v - 0.5 * lb.v, atol=1e-13)
    np.testing.assert_allclose(lc.mu, 2 * la.mu - 0.5 * lb.mu, atol=1e-13)
    pic = solve_linearized(own, mfg_07, a, method="picard")
    np.testing.assert_allclose(pic.v, la.v, atol=1e-10)
    np.testing.assert_allclose(np.sum(la.mu, axis=-1), 0.0, atol=1e-10)


def test_evaluator_matches_bvp_oracle(own, frozen):
    ev = MasterEvaluator(own)
    for row in frozen["master"]:
        m = np.array([row["m_first"], 1 - row["m_first"]])
        U, D1 = ev.evaluate(row["t"], m)
        np.testing.assert_allclose(U, row["U"], atol=1e-8)
        # D1[:, 1] is the derivative along delta_2 - delta_1
        np.testing.assert_allclose(-D1[:, 1], row["dU_dir"], atol=1e-6)


def test_derivative_along_flow_matches_evaluator(own3):
    base = solve_mfg(own3, 0.0, [0.5, 0.3, 0.2], dt=1e-2)
    D = derivative_along_flow(own3, base)
    ev = MasterEvaluator(own3, dt=1e-2)
    k = 40
    _, D1 = ev.evaluate(base.grid.nodes[k], base.m.m[k])
    np.testing.assert_allclose(D[k], D1, atol=1e-8)


def test_terminal_slice_is_G(field10, own):
    np.testing.assert_array_equal(field10.U[-1], own.G(field10.grid.nodes))


def test_m_independent_field(field_state, state_cost):
    U = field_state.U
    assert np.max(np.abs(U - U[:, :1])) <= 1e-12
    D1 = field_state.D1[np.isfinite(field_state.D1)]
    assert np.max(np.abs(D1)) <= 1e-12
    assert master_residual(state_cost, field_state) <= 1e-6
    assert regularity_probe(field_state)[1] == 0.0


def test_identity_and_direction_independence(field10, rng):
    D1 = field10.D1
    ok = np.isfinite(D1).all(axis=(-1, -2))
    DmU = field10.DmU[ok]  # (P, x, y, z)
    # [DmU(m, y)]_z = [DmU(m, 0)]_z - [DmU(m, 0)]_y
    recon = DmU[:, :, 0, None, :] - DmU[:, :, 0, :, None]
    assert np.max(np.abs(DmU - recon)) <= 1e-8
    mu = np.array([0.4, -0.4])
    dots = np.einsum("pxyz,z->pxy", DmU, mu)
    assert np.max(np.abs(dots - dots[..., :1])) <= 1e-8


def test_finite_differences_match_lin(field10):
    fd = finite_difference_derivative(field10)
    ok = np.isfinite(fd) & np.isfinite(field10.D1)
    gap = np.max(np.abs(fd[ok] - field10.D1[ok]))
    assert gap <= field10.grid.h**2 + 2e-11


def test_residual_refinement_and_sensitivity(own, field10):
    from dataclasses import replace

    r10 = master_residual(own, field10)
    coarse = build_master_field(own, SimplexGrid(2, 5), TimeGrid(0.0, 1.0, 4), dt=4e-3)
    assert master_residual(own, coarse) / r10 >= 2.0
    bad = replace(field10, U=field10.U * 1.01)
    assert master_residual(own, bad) >= 10 * r10


def test_regularity_probe_stable(own, field10):
    lu, ld = regularity_probe(field10)
    assert np.isfinite(lu) and np.isfinite(ld)
    f20 = build_master_field(own, SimplexGrid(2, 20), TimeGrid(0.0, 1.0, 4), dt=2e-3)
    lu2, ld2 = regularity_probe(f20)
    assert abs(lu2 / lu - 1) <= 0.25 and abs(ld2 / ld - 1) <= 0.25


def test_evaluate_requires_tabulated_point(field10):
    U, _ = field10.evaluate(0.5, field10.grid.nodes[3])
    np.testing.assert_array_equal(U, field10.U[2, 3])
    with pytest.raises(InputError):
        field10.evaluate(0.3, field10.grid.nodes[3])

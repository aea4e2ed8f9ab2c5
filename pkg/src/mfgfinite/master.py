"""Master field ``U(t, x, m)`` built from MFG characteristics.

``U(t0, x, m0)`` is the value ``u(t0, x)`` of the MFG system started at
``(t0, m0)``.  Its measure derivative comes from the linearized system, a
linear two-point problem for ``(v, mu)``::

    dv/dt  = -Gamma v - J_F(m) mu,              v(T) = J_G(m(T)) mu(T)
    dmu/dt = Gamma^T mu + dGamma(u; v)^T m,     mu(t0) = mu0

whose value ``v(t0)`` equals ``DmU(t0, ., m0, y) . mu0`` for any reference
state ``y``.  Only ``DmU(., ., ., 0)`` is stored; the other reference states
follow from ``[DmU(m, y)]_z = [DmU(m, 0)]_z - [DmU(m, 0)]_y``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConvergenceError, DivergenceError, InputError
from .mfg import (DEFAULT_TOL, MfgSolution, TimeGrid, _is_monotone, hermite_mid,
                  solve_characteristics)
from .model import delta, tangent_vector


# ---------------------------------------------------------------------------
# simplex lattice

class SimplexGrid:
    """Points of the simplex with coordinates in ``(1/n) Z``, lexicographic order."""

    def __init__(self, d, n):
        if d < 2 or n < 1:
            raise InputError("need d >= 2 and n >= 1", op="SimplexGrid")
        self.d = int(d)
        self.n = int(n)
        self.counts = compositions(self.n, self.d)
        self.nodes = self.counts / self.n
        self._rank = {tuple(c): i for i, c in enumerate(self.counts.tolist())}

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def size(self):
        return len(self.counts)

    @property
    def interior_mask(self):
        return np.all(self.counts >= 1, axis=1)

    def rank(self, counts):
        return self._rank.get(tuple(int(c) for c in counts), -1)

    def shift_table(self):
        """``[k, i, j]``: rank of node ``k`` with one unit moved from ``j`` to ``i``; -1 if off-grid."""
        out = np.full((self.size, self.d, self.d), -1, dtype=np.int64)
        for k, c in enumerate(self.counts):
            for i in range(self.d):
                for j in range(self.d):
                    if i == j:
                        out[k, i, j] = k
                    elif c[j] > 0:
                        c2 = c.copy()
                        c2[i] += 1
                        c2[j] -= 1
                        out[k, i, j] = self._rank[tuple(c2.tolist())]
        return out


def compositions(n, d):
    """All ``d``-tuples of nonnegative integers summing to ``n``, lexicographic."""
    rows = []
    for bars in itertools.combinations(range(n + d - 1), d - 1):
        prev = -1
        row = []
        for b in bars:
            row.append(b - prev - 1)
            prev = b
        row.append(n + d - 2 - prev)
        rows.append(row)
    out = np.array(rows, dtype=np.int64).reshape(-1, d)
    return out[np.lexsort(out.T[::-1])]


def composition_count(n, d):
    return math.comb(n + d - 1, d - 1)


# ---------------------------------------------------------------------------
# linearized system

@dataclass(frozen=True)
class LinearizedSolution:
    grid: TimeGrid
    v: np.ndarray
    mu: np.ndarray


def _lin_blocks(spec, u, m):
    """Coefficient matrix of the stacked system ``z = (v, mu)``, column form."""
    d = spec.d
    gam = spec.rate_matrix(u)
    jf = spec.F.jacobian(m)
    q = np.einsum("...y,...yzw->...zw", m, spec.rate_matrix_jacobian(u))
    A = np.empty(gam.shape[:-2] + (2 * d, 2 * d))
    A[..., :d, :d] = -gam
    A[..., :d, d:] = -jf
    A[..., d:, :d] = q
    A[..., d:, d:] = np.swapaxes(gam, -1, -2)
    return A


def _column_propagators(h, A0, Ah, A1):
    eye = np.eye(A0.shape[-1])
    S2 = Ah @ (eye + 0.5 * h * A0)
    S3 = Ah @ (eye + 0.5 * h * S2)
    S4 = A1 @ (eye + h * S3)
    return eye + (h / 6.0) * (A0 + 2 * S2 + 2 * S3 + S4)


def _lin_step_matrices(spec, h, u, du, m, dm):
    u_mid = hermite_mid(u[:-1], u[1:], du[:-1], du[1:], h)
    m_mid = hermite_mid(m[:-1], m[1:], dm[:-1], dm[1:], h)
    A = _lin_blocks(spec, u, m)
    return _column_propagators(h, A[:-1], _lin_blocks(spec, u_mid, m_mid), A[1:])


def _shooting_v0(spec, P, start, m_T, mu0):
    """Initial ``v`` for each batch member given step matrices ``P`` (n, B, 2d, 2d).

    ``mu0`` has shape ``(B, d, r)``; returns ``(B, d, r)``.
    """
    d = spec.d
    n, B = P.shape[:2]
    psi = np.broadcast_to(np.eye(2 * d), (B, 2 * d, 2 * d)).copy()
    phi = np.empty_like(psi)
    at_end = start >= n
    phi[at_end] = psi[at_end]
    for k in range(n - 1, -1, -1):
        psi = psi @ P[k]
        hit = start == k
        if hit.any():
            phi[hit] = psi[hit]
        if k <= start.min():
            break
    if not np.isfinite(phi).all():
        raise DivergenceError("linearized system diverged", op="solve_linearized")
    jg = spec.G.jacobian(m_T)
    lhs = phi[:, :d, :d] - jg @ phi[:, d:, :d]
    rhs = (jg @ phi[:, d:, d:] - phi[:, :d, d:]) @ mu0
    return np.linalg.solve(lhs, rhs)


def _lin_picard(spec, P, mu0, m_T, damping, tol, max_iter):
    """Damped Picard on ``mu`` for one member; ``P`` has shape (n, 2d, 2d)."""
    d = spec.d
    n = P.shape[0]
    jg = spec.G.jacobian(m_T)
    r = mu0.shape[-1]
    mu = np.broadcast_to(mu0, (n + 1, d, r)).copy()
    update = np.inf
    for it in range(1, max_iter + 1):
        # backward v with mu fixed: exact on the block-triangular splitting
        v = np.empty_like(mu)
        v[n] = jg @ mu[n]
        for k in range(n - 1, -1, -1):
            # solve z_{k+1} = P_k z_k for v_k given mu_k, v_{k+1}
            pvv, pvm = P[k, :d, :d], P[k, :d, d:]
            v[k] = np.linalg.solve(pvv, v[k + 1] - pvm @ mu[k])
        mu_new = np.empty_like(mu)
        mu_new[0] = mu0
        for k in range(n):
            mu_new[k + 1] = P[k, d:, :d] @ v[k] + P[k, d:, d:] @ mu_new[k]
        update = float(np.max(np.abs(mu_new - mu)))
        if update < tol:
            return v, mu_new
        mu = (1 - damping) * mu + damping * mu_new
    raise ConvergenceError("Picard iteration on the linearized system did not converge",
                           op="solve_linearized", last_update=update)


def solve_linearized(spec, base: MfgSolution, mu0, *, method="shooting", damping=0.5,
                     tol=1e-13, max_iter=2000):
    """Solve the linearized system along ``base`` with ``mu(t0) = mu0``.

    ``mu0`` is a tangent vector ``(d,)`` or a stack of them as columns
    ``(d, r)``.  ``method`` is ``"shooting"`` (fundamental matrix, one pass)
    or ``"picard"`` (damped iteration on ``mu``).
    """
    mu0 = np.asarray(mu0, dtype=float)
    single = mu0.ndim == 1
    cols = mu0[:, None] if single else mu0
    for c in cols.T:
        tangent_vector(c)
    grid = base.grid
    d = spec.d
    u, m = base.u.u, base.m.m
    if grid.n_steps == 0:
        v = (spec.G.jacobian(m[-1]) @ cols)[None]
        mu = cols[None].copy()
    else:
        P = _lin_step_matrices(spec, grid.dt, u, base.u.du, m, base.m.dm)
        if method == "shooting":
            v0 = _shooting_v0(spec, P[:, None], np.zeros(1, dtype=int), m[-1][None],
                              cols[None])[0]
            z = np.empty((grid.n_steps + 1, 2 * d, cols.shape[1]))
            z[0, :d], z[0, d:] = v0, cols
            for k in range(grid.n_steps):
                z[k + 1] = P[k] @ z[k]
            v, mu = z[:, :d], z[:, d:]
        elif method == "picard":
            v, mu = _lin_picard(spec, P, cols, m[-1], damping, tol, max_iter)
        else:
            raise InputError(f"unknown method {method!r}", op="solve_linearized")
        if not (np.isfinite(v).all() and np.isfinite(mu).all()):
            raise DivergenceError("linearized system diverged", op="solve_linearized")
    if single:
        v, mu = v[..., 0], mu[..., 0]
    return LinearizedSolution(grid, v, mu)


def derivative_along_flow(spec, base: MfgSolution, *, method="shooting"):
    """``DmU(t, x, m(t), 0)`` along the MFG flow, shape ``(n+1, d, d)``.

    Uses ``d-1`` linearized solutions started from ``delta_z - delta_0``: the
    pushed-forward directions ``mu(t)`` stay independent, so at every time
    ``v(t) = D(t) mu(t)`` determines ``D(t)`` with ``D[:, 0] = 0``.
    """
    d = spec.d
    lin = solve_linearized(spec, base, _tangent_basis(d), method=method)
    C = lin.mu[:, 1:, :]  # (n+1, d-1, d-1)
    D = np.zeros(lin.v.shape[:1] + (d, d))
    # D[:, x, 1:] @ C = v  ->  D[:, x, 1:] = v @ C^{-1}
    D[:, :, 1:] = np.linalg.solve(np.swapaxes(C, -1, -2), np.swapaxes(lin.v, -1, -2)).swapaxes(-1, -2)
    return D


def _tangent_basis(d):
    basis = np.zeros((d, d - 1))
    basis[0] = -1.0
    basis[1:] = np.eye(d - 1)
    return basis


def solve_points(spec, solver, starts, m0s, want_dmu, *, damping=0.5, tol=DEFAULT_TOL,
                 max_iter=2000, chunk_bytes=64e6):
    """Value and measure derivative at many ``(solver node, m0)`` starting points.

    Returns ``U`` ``(B, d)``, ``D1`` ``(B, d, d)`` (NaN where ``want_dmu`` is
    false) and the largest Picard iteration count.
    """
    d = spec.d
    starts = np.asarray(starts, dtype=int)
    m0s = np.asarray(m0s, dtype=float)
    want_dmu = np.broadcast_to(np.asarray(want_dmu, dtype=bool), starts.shape)
    B = len(starts)
    U = np.zeros((B, d))
    D1 = np.full((B, d, d), np.nan)
    basis = _tangent_basis(d)
    per_member = (solver.n_steps + 1) * (2 * d) ** 2 * 8 * 4
    size = max(1, int(chunk_bytes // per_member))
    order = np.argsort(starts, kind="stable")  # neighbours in a chunk waste few steps
    iters = 0
    for lo in range(0, B, size):
        sel = order[lo:lo + size]
        s_min = int(starts[sel].min())
        sub = TimeGrid(solver.nodes[s_min], solver.T, solver.n_steps - s_min) \
            if s_min < solver.n_steps else TimeGrid(solver.T, solver.T, 0)
        rel = starts[sel] - s_min
        try:
            batch = solve_characteristics(spec, sub, m0s[sel], rel, damping=damping, tol=tol,
                                          max_iter=max_iter)
        except ConvergenceError as err:
            err.context["failed_points"] = [[float(solver.nodes[starts[b]])] + m0s[b].tolist()
                                            for b in sel]
            raise
        iters = max(iters, batch.iterations)
        U[sel] = batch.u[rel, np.arange(len(sel))]
        lin = np.nonzero(want_dmu[sel])[0]
        if not len(lin):
            continue
        if sub.n_steps > 0:
            Pm = _lin_step_matrices(spec, sub.dt, batch.u[:, lin], batch.du[:, lin],
                                    batch.m[:, lin], batch.dm[:, lin])
            v0 = _shooting_v0(spec, Pm, rel[lin], batch.m[-1, lin],
                              np.broadcast_to(basis, (len(lin), d, d - 1)))
        else:
            v0 = spec.G.jacobian(batch.m[-1, lin]) @ basis
        D1[sel[lin], :, 0] = 0.0
        D1[sel[lin], :, 1:] = v0
    return U, D1, iters


class MasterEvaluator:
    """Direct evaluation of ``U`` and ``DmU(., ., ., 0)`` at arbitrary ``(t, m)``.

    Times are snapped to a solver grid of step ``dt`` anchored at ``T``.
    """

    def __init__(self, spec, dt=None, *, damping=0.5, tol=DEFAULT_TOL):
        self.spec = spec
        self.dt = 1e-3 * spec.T if dt is None else float(dt)
        self.n = max(1, int(round(spec.T / self.dt)))
        self.solver = TimeGrid(0.0, spec.T, self.n)
        self.damping = damping
        self.tol = tol

    def snap(self, t):
        k = np.clip(np.rint(np.asarray(t, dtype=float) / self.solver.dt), 0, self.n)
        return k.astype(int)

    def evaluate_many(self, ts, ms, derivatives=True):
        ms = np.atleast_2d(np.asarray(ms, dtype=float))
        starts = np.broadcast_to(self.snap(ts), (len(ms),))
        U, D1, _ = solve_points(self.spec, self.solver, starts, ms, derivatives,
                                damping=self.damping, tol=self.tol)
        return U, D1

    def evaluate(self, t, m):
        U, D1 = self.evaluate_many([t], [m])
        return U[0], D1[0]


# ---------------------------------------------------------------------------
# master field

@dataclass
class MasterField:
    """Tabulated ``U``, its time derivative and ``DmU(., ., ., 0)``.

    ``U`` and ``dtU`` have shape ``(n_times, n_nodes, d)``; ``D1`` has shape
    ``(n_times, n_nodes, d, d)`` with ``D1[..., x, z] = [DmU(t, x, m, 0)]_z``
    (NaN where not computed).
    """

    grid: SimplexGrid
    times: TimeGrid
    U: np.ndarray
    D1: np.ndarray
    dtU: np.ndarray | None
    solver_dt: float
    iterations: int
    uniqueness_guaranteed: bool = True

    @property
    def DmU(self):
        """``[t, node, x, y, z] = [DmU(t, x, m, y)]_z``."""
        return self.D1[..., None, :] - self.D1[..., :, None]

    def delta_U(self):
        """``[t, node, x, y] = U(t, y, m) - U(t, x, m)``."""
        return delta(self.U)

    def evaluate(self, t, m):
        """``(U, D1)`` at a tabulated time and grid node."""
        j = self.times.index_of(t)
        k = self.grid.rank(np.rint(np.asarray(m) * self.grid.n))
        if abs(self.times.nodes[j] - t) > 1e-12 or k < 0 or \
                np.max(np.abs(self.grid.nodes[k] - m)) > 1e-12:
            raise InputError("(t, m) is not a tabulated point", op="MasterField.evaluate")
        return self.U[j, k], self.D1[j, k]

    def spline(self):
        """Cubic spline in time of ``U`` over all nodes."""
        if self.times.n_steps == 0:
            raise InputError("a single tabulated time cannot be interpolated",
                             op="MasterField.spline")
        return CubicSpline(self.times.nodes, self.U, axis=0)


def _stencil_starts(j, n_tab, k, n_solver):
    """Solver start nodes and weights for the time derivative at solver node k."""
    if n_solver < 2:
        return None
    if 0 < k < n_solver:
        return (k - 1, k + 1), (-0.5, 0.5)
    # one-sided ends: third order when four nodes fit, else second order
    if n_solver >= 3:
        w = (-11 / 6, 3.0, -1.5, 1 / 3)
        if k == 0:
            return (0, 1, 2, 3), w
        return (k, k - 1, k - 2, k - 3), tuple(-c for c in w)
    if k == 0:
        return (0, 1, 2), (-1.5, 2.0, -0.5)
    return (k - 2, k - 1, k), (0.5, -2.0, 1.5)


def build_master_field(spec, grid: SimplexGrid, times: TimeGrid, *, dt=None, damping=0.5,
                       tol=DEFAULT_TOL * 0.01, max_iter=2000, dmu_nodes="interior",
                       time_derivative=True, chunk_bytes=64e6):
    """Tabulate the master field at every ``(t, node)`` of ``times x grid``.

    Characteristics start on a fine solver grid of step ``dt`` that contains
    every tabulated time; the time derivative uses extra characteristics one
    solver step away.  ``dmu_nodes`` is ``"interior"`` (all coordinates at
    least ``h``), ``"all"`` or ``"none"``.
    """
    if grid.d != spec.d:
        raise InputError("grid dimension differs from the model", op="build_master_field")
    if times.T != spec.T:
        raise InputError("tabulation times must end at T", op="build_master_field")
    d = spec.d
    dt = 1e-3 * spec.T if dt is None else float(dt)
    if times.n_steps == 0:
        ratio, solver = 1, TimeGrid.with_step(max(times.t0 - 2 * dt, 0.0), spec.T, dt)
        tab_idx = np.array([solver.n_steps])
    else:
        ratio = max(1, int(round(times.dt / dt)))
        solver = TimeGrid(times.t0, times.T, times.n_steps * ratio)
        tab_idx = np.arange(times.n_steps + 1) * ratio
    n_tab, P = len(tab_idx), grid.size

    if dmu_nodes == "interior":
        want_dmu = grid.interior_mask
    elif dmu_nodes == "all":
        want_dmu = np.ones(P, dtype=bool)
    elif dmu_nodes == "none":
        want_dmu = np.zeros(P, dtype=bool)
    else:
        raise InputError(f"unknown dmu_nodes {dmu_nodes!r}", op="build_master_field")

    # job list: (start node, tab index, grid node, weight for dt, is_main)
    starts, tabs, nodes, weights, main = [], [], [], [], []
    for j, k in enumerate(tab_idx):
        sten = _stencil_starts(j, n_tab, int(k), solver.n_steps) if time_derivative else None
        offsets = {int(k): 0.0}
        if sten is not None:
            for s, w in zip(*sten):
                offsets[s] = offsets.get(s, 0.0) + w
        for s, w in offsets.items():
            for p in range(P):
                starts.append(s)
                tabs.append(j)
                nodes.append(p)
                weights.append(w / solver.dt if solver.n_steps else 0.0)
                main.append(s == int(k))
    starts = np.array(starts)
    tabs = np.array(tabs)
    nodes = np.array(nodes)
    weights = np.array(weights)
    main = np.array(main)

    U_job, D1_job, iters = solve_points(spec, solver, starts, grid.nodes[nodes],
                                        main & want_dmu[nodes], damping=damping, tol=tol,
                                        max_iter=max_iter, chunk_bytes=chunk_bytes)
    U = np.zeros((n_tab, P, d))
    D1 = np.full((n_tab, P, d, d), np.nan)
    U[tabs[main], nodes[main]] = U_job[main]
    D1[tabs[main], nodes[main]] = D1_job[main]
    dtU = None
    if time_derivative and solver.n_steps >= 2:
        dtU = np.zeros((n_tab, P, d))
        np.add.at(dtU, (tabs, nodes), weights[:, None] * U_job)
    return MasterField(grid, times, U, D1, dtU, solver.dt, iters,
                       bool(_is_monotone(spec)))


def master_residual(spec, field: MasterField, *, per_node=False):
    """Sup over tabulated times, states and nodes with ``DmU`` of the master-equation residual."""
    if field.dtU is None:
        raise InputError("field was built without time derivatives", op="master_residual")
    U, D1 = field.U, field.D1
    m = field.grid.nodes[None]
    dU = delta(U)
    ham = spec.hamiltonian(spec.states, dU)
    # sum_y m_y [DmU(m, y)] . alpha*(y) collapses to D1 . (m Gamma) since [DmU(m,y)]_z = D1_z - D1_y
    dm_dt = np.einsum("...y,...yz->...z", m, spec.rate_matrix(U))
    transport = np.einsum("...xz,...z->...x", D1, dm_dt)
    res = -field.dtU + ham - transport - spec.F(np.broadcast_to(m, U.shape))
    res = np.abs(res)
    ok = np.isfinite(res).all(axis=-1)
    if per_node:
        return np.where(ok[..., None], res, np.nan)
    if not ok.any():
        raise InputError("no node carries a measure derivative", op="master_residual")
    return float(res[ok].max())



def regularity_probe(field: MasterField):
    """Empirical Lipschitz constants in ``m`` of ``Delta U`` and ``DmU`` over adjacent nodes."""
    grid = field.grid
    shift = grid.shift_table()
    dU = field.delta_U()
    DmU = field.DmU
    lip_u = 0.0
    lip_d = 0.0
    step = grid.h * math.sqrt(2.0)
    for i in range(grid.d):
        for j in range(grid.d):
            if i == j:
                continue
            nb = shift[:, i, j]
            ok = nb >= 0
            a = np.nonzero(ok)[0]
            b = nb[ok]
            du = np.abs(dU[:, a] - dU[:, b]).reshape(len(field.U), len(a), -1).max(axis=(0, 2))
            lip_u = max(lip_u, float(du.max(initial=0.0)) / step)
            dd = np.abs(DmU[:, a] - DmU[:, b]).reshape(len(field.U), len(a), -1)
            dd = dd[np.isfinite(dd)]
            if dd.size:
                lip_d = max(lip_d, float(dd.max()) / step)
    return lip_u, lip_d


def finite_difference_derivative(field: MasterField):
    """Central differences of ``U`` across neighbours along ``delta_z - delta_0``.

    Returns an array shaped like ``field.D1`` (NaN where a neighbour is missing).
    """
    grid = field.grid
    shift = grid.shift_table()
    out = np.full(field.D1.shape, np.nan)
    out[..., 0] = 0.0
    for z in range(1, grid.d):
        fwd = shift[:, z, 0]
        bwd = shift[:, 0, z]
        ok = (fwd >= 0) & (bwd >= 0)
        k = np.nonzero(ok)[0]
        col = out[..., z]
        col[:, k] = (field.U[:, fwd[k]] - field.U[:, bwd[k]]) / (2 * grid.h)
    return out

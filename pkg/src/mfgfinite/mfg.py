"""Forward-backward solver for the finite-state MFG system.

The value ``u`` solves the backward HJB equation
``du/dt = H(x, Delta^x u) - F(x, m(t))`` with ``u(T) = G(m(T))`` and the
measure solves the forward Kolmogorov equation ``dm/dt = Gamma(u)^T m``.
Both lines are integrated with classical RK4 on a uniform grid; the
coefficient taken from the other line at half steps comes from cubic Hermite
interpolation of the stored node values and node derivatives, which keeps the
scheme fourth order.  The coupling is resolved by damped Picard iteration on
the measure flow.

The batched entry point :func:`solve_characteristics` runs many
characteristics at once on one grid.  A characteristic may start at any grid
node: before its start node the measure is frozen at its initial value and the
value function is computed but meaningless.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DivergenceError, InputError, IntegrationError
from .model import delta, monotonicity_probe, simplex_point

NEG_CLIP = 1e-12
DEFAULT_TOL = 1e-11


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if self.T < self.t0:
            raise InputError("grid end precedes its start", op="TimeGrid")
        if self.n_steps < 1 and self.T > self.t0:
            raise InputError("n_steps must be >= 1", op="TimeGrid")
        if self.T == self.t0 and self.n_steps != 0:
            object.__setattr__(self, "n_steps", 0)

    @classmethod
    def with_step(cls, t0, T, dt):
        if T == t0:
            return cls(float(t0), float(T), 0)
        return cls(float(t0), float(T), max(1, int(round((T - t0) / dt))))

    @property
    def dt(self):
        return (self.T - self.t0) / self.n_steps if self.n_steps else 0.0

    @property
    def nodes(self):
        if self.n_steps == 0:
            return np.array([self.t0])
        nodes = self.t0 + self.dt * np.arange(self.n_steps + 1)
        nodes[-1] = self.T
        return nodes

    def index_of(self, t):
        """Index of the node closest to ``t``."""
        if self.n_steps == 0:
            return 0
        return int(round((t - self.t0) / self.dt))


@dataclass(frozen=True)
class ValueFlow:
    grid: TimeGrid
    u: np.ndarray
    du: np.ndarray | None = None

    def at(self, t):
        """Value vector at time ``t`` (linear interpolation between nodes)."""
        return _interp_nodes(self.grid, self.u, t)


@dataclass(frozen=True)
class MeasureFlow:
    grid: TimeGrid
    m: np.ndarray
    dm: np.ndarray | None = None

    def at(self, t):
        return _interp_nodes(self.grid, self.m, t)


@dataclass(frozen=True)
class MfgSolution:
    u: ValueFlow
    m: MeasureFlow
    iterations: int
    residual: float
    uniqueness_guaranteed: bool = True

    @property
    def grid(self):
        return self.u.grid


def _interp_nodes(grid, arr, t):
    if grid.n_steps == 0:
        return arr[0]
    s = np.clip((np.asarray(t, dtype=float) - grid.t0) / grid.dt, 0, grid.n_steps)
    k = np.minimum(np.floor(s).astype(int), grid.n_steps - 1)
    w = (s - k)[..., None]
    return (1 - w) * arr[k] + w * arr[k + 1]


def hermite_mid(y0, y1, d0, d1, h):
    """Cubic Hermite value at the midpoint of a step of length ``h``."""
    return 0.5 * (y0 + y1) + 0.125 * h * (d0 - d1)


def node_derivative(grid, arr):
    if grid.n_steps < 2:
        return np.zeros_like(arr) if grid.n_steps == 0 else np.repeat(
            (arr[1:] - arr[:-1]) / grid.dt, 2, axis=0)
    return np.gradient(arr, grid.dt, axis=0, edge_order=2)


# ---------------------------------------------------------------------------
# line integrators (batched; leading axis is time)

def _hjb_sweep(spec, h, F_nodes, F_mid, u_T):
    n = F_mid.shape[0]
    u = np.empty_like(F_nodes)
    u[n] = u_T
    def rhs(val, fv):
        return spec.row_hamiltonian(val) - fv

    for k in range(n - 1, -1, -1):
        y = u[k + 1]
        k1 = rhs(y, F_nodes[k + 1])
        k2 = rhs(y - 0.5 * h * k1, F_mid[k])
        k3 = rhs(y - 0.5 * h * k2, F_mid[k])
        k4 = rhs(y - h * k3, F_nodes[k])
        u[k] = y - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    bad = ~np.isfinite(u).reshape(n + 1, -1).all(axis=1)
    if bad.any():
        node = int(np.nonzero(bad)[0].max())
        raise DivergenceError(f"HJB integration produced non-finite values at time node {node}",
                              op="solve_hjb_backward", context={"time_node": node})
    return u, rhs(u, F_nodes)


def rk4_propagators(h, A0, Ah, A1):
    """RK4 one-step matrices for the row-vector ODE ``y' = y A(t)``.

    ``A0, Ah, A1`` are the coefficient at the step start, midpoint and end,
    shape ``(..., d, d)``; returns ``P`` with ``y_next = y @ P``.
    """
    eye = np.eye(A0.shape[-1])
    S2 = (eye + 0.5 * h * A0) @ Ah
    S3 = (eye + 0.5 * h * S2) @ Ah
    S4 = (eye + h * S3) @ A1
    return eye + (h / 6.0) * (A0 + 2 * S2 + 2 * S3 + S4)


def _kfp_sweep(spec, h, u, du, m0, active):
    """Forward KFP given the value flow; ``active[k]`` marks steps k -> k+1 in use."""
    n = u.shape[0] - 1
    gam = spec.rate_matrix(u)
    u_mid = hermite_mid(u[:-1], u[1:], du[:-1], du[1:], h)
    gam_mid = spec.rate_matrix(u_mid)
    P = rk4_propagators(h, gam[:-1], gam_mid, gam[1:])
    if active is not None:
        P = np.where(active[..., None, None], P, np.eye(spec.d))
    m = np.empty_like(u)
    m[0] = m0
    for k in range(n):
        m[k + 1] = np.einsum("...x,...xy->...y", m[k], P[k])
    low = m.min()
    if low < -NEG_CLIP:
        raise IntegrationError(f"negative mass {low:.3e} in KFP integration",
                               op="solve_kfp_forward", context={"min_mass": float(low)})
    if low < 0:
        m = np.clip(m, 0.0, None)
        m /= m.sum(axis=-1, keepdims=True)
    dm = np.einsum("...x,...xy->...y", m, gam)
    if active is not None:
        dm = np.where(_node_active(active)[..., None], dm, 0.0)
    return m, dm


def _node_active(active):
    """Node k is active when step k is (the last node follows the last step)."""
    return np.concatenate([active, active[-1:]], axis=0)


def _terminal_and_running(spec, h, m, dm):
    m_mid = hermite_mid(m[:-1], m[1:], dm[:-1], dm[1:], h)
    return spec.F(m), spec.F(m_mid), spec.G(m[-1])


# ---------------------------------------------------------------------------
# public single-line solvers

def solve_hjb_backward(spec, m):
    """Backward HJB for a given measure flow; exact terminal data ``G(m(T))``."""
    grid = m.grid
    if grid.n_steps == 0:
        u = spec.G(m.m[-1])[None]
        return ValueFlow(grid, u, np.zeros_like(u))
    dm = m.dm if m.dm is not None else node_derivative(grid, m.m)
    F_nodes, F_mid, G_T = _terminal_and_running(spec, grid.dt, m.m, dm)
    u, du = _hjb_sweep(spec, grid.dt, F_nodes, F_mid, G_T)
    return ValueFlow(grid, u, du)


def solve_kfp_forward(spec, u, m0):
    """Forward KFP driven by the optimal rates of the value flow ``u``."""
    m0 = simplex_point(m0)
    grid = u.grid
    if grid.n_steps == 0:
        return MeasureFlow(grid, m0[None].copy(), np.zeros((1, spec.d)))
    du = u.du if u.du is not None else node_derivative(grid, u.u)
    m, dm = _kfp_sweep(spec, grid.dt, u.u, du, m0, None)
    return MeasureFlow(grid, m, dm)


# ---------------------------------------------------------------------------
# coupled solver

@dataclass
class CharacteristicBatch:
    """Raw output of :func:`solve_characteristics`; arrays are ``(n+1, B, d)``."""

    grid: TimeGrid
    start: np.ndarray
    u: np.ndarray
    du: np.ndarray
    m: np.ndarray
    dm: np.ndarray
    iterations: int
    last_update: float


def solve_characteristics(spec, grid, m0, start=None, *, damping=0.5, tol=DEFAULT_TOL,
                          max_iter=1000, m_init=None):
    """Solve a batch of MFG systems on one grid by damped Picard iteration.

    ``m0`` has shape ``(B, d)``; ``start[b]`` is the grid node where
    characteristic ``b`` begins (default 0).  ``m_init`` optionally gives the
    initial measure-flow guess, shape ``(n+1, B, d)``.
    """
    if not 0 < damping <= 1:
        raise InputError("damping must lie in (0, 1]", op="solve_mfg")
    m0 = np.atleast_2d(np.asarray(m0, dtype=float))
    B = m0.shape[0]
    n = grid.n_steps
    h = grid.dt
    start = np.zeros(B, dtype=int) if start is None else np.asarray(start, dtype=int)
    if n == 0:
        u = spec.G(m0)[None]
        z = np.zeros_like(u)
        return CharacteristicBatch(grid, start, u, z, m0[None].copy(), z.copy(), 0, 0.0)
    steps = np.arange(n)[:, None]
    active = steps >= start[None, :]
    node_on = _node_active(active)[..., None]

    if m_init is None:
        m = np.broadcast_to(m0, (n + 1, B, spec.d)).copy()
    else:
        m = np.array(m_init, dtype=float, copy=True).reshape(n + 1, B, spec.d)
        m = np.where(node_on, m, m0[None])
    dm = np.where(node_on, node_derivative(grid, m), 0.0)
    # measure frozen before each start node
    m_frozen = np.where(node_on, 0.0, m0[None])

    update = np.inf
    u_prev = None
    for it in range(1, max_iter + 1):
        F_nodes, F_mid, G_T = _terminal_and_running(spec, h, m, dm)
        u, du = _hjb_sweep(spec, h, F_nodes, F_mid, G_T)
        # the forward sweep starts every member at its own start node
        m_new, dm_new = _kfp_sweep_from(spec, h, u, du, m0, start, active)
        m_new = np.where(node_on, m_new, m_frozen)
        update = float(np.max(np.abs(m_new - m)))
        if update < tol:
            return CharacteristicBatch(grid, start, u, du, m_new, dm_new, it, update)
        if u_prev is not None and np.max(np.abs(u - u_prev)) < tol:
            # u has settled while damping still drags m: accept if u is also the
            # backward solution for the undamped forward output
            u_chk, _ = _hjb_sweep(spec, h, *_terminal_and_running(spec, h, m_new, dm_new))
            if np.max(np.abs(u_chk - u)) < tol:
                return CharacteristicBatch(grid, start, u, du, m_new, dm_new, it, update)
        u_prev = u
        m = (1 - damping) * m + damping * m_new
        dm = (1 - damping) * dm + damping * dm_new
    raise ConvergenceError(f"Picard iteration did not converge in {max_iter} iterations",
                           op="solve_mfg", last_update=update,
                           context={"max_iter": max_iter, "tol": tol})


def _kfp_sweep_from(spec, h, u, du, m0, start, active):
    # identity propagators before the start node keep m at m0 until then
    return _kfp_sweep(spec, h, u, du, m0, active)


def _two_line_residual(spec, grid, u, m):
    if grid.n_steps < 2:
        return 0.0, 0.0
    h = grid.dt
    dudt = (u[2:] - u[:-2]) / (2 * h)
    dmdt = (m[2:] - m[:-2]) / (2 * h)
    uc, mc = u[1:-1], m[1:-1]
    hjb = -dudt + spec.hamiltonian(spec.states, delta(uc)) - spec.F(mc)
    kfp = dmdt - np.einsum("...x,...xy->...y", mc, spec.rate_matrix(uc))
    return float(np.max(np.abs(hjb))), float(np.max(np.abs(kfp)))


def _is_monotone(spec):
    cached = getattr(spec, "_monotone_flag", None)
    if cached is None:
        cached = monotonicity_probe(spec, 64, 0) >= -1e-12
        spec._monotone_flag = cached
    return cached


def solve_mfg(spec, t0, m0, damping=0.5, tol=DEFAULT_TOL, max_iter=1000, *, dt=None,
              m_init=None):
    """Solve the MFG system on ``[t0, T]`` from ``m(t0) = m0``.

    ``m_init`` is the starting guess for the measure flow: ``None`` (constant
    ``m0``), ``"uniform"`` or an array of shape ``(n+1, d)``.
    """
    m0 = simplex_point(m0)
    if len(m0) != spec.d:
        raise InputError("m0 has the wrong dimension", op="solve_mfg")
    if not spec.T >= t0:
        raise InputError("t0 must not exceed T", op="solve_mfg")
    dt = 1e-3 * spec.T if dt is None else dt
    grid = TimeGrid.with_step(t0, spec.T, dt)
    init = None
    if isinstance(m_init, str):
        if m_init != "uniform":
            raise InputError(f"unknown initial guess {m_init!r}", op="solve_mfg")
        init = np.full((grid.n_steps + 1, 1, spec.d), 1.0 / spec.d)
    elif m_init is not None:
        init = np.asarray(m_init, dtype=float).reshape(grid.n_steps + 1, 1, spec.d)
    batch = solve_characteristics(spec, grid, m0[None], damping=damping, tol=tol,
                                  max_iter=max_iter, m_init=init)
    u, du, m, dm = (a[:, 0] for a in (batch.u, batch.du, batch.m, batch.dm))
    res = max(_two_line_residual(spec, grid, u, m))
    return MfgSolution(ValueFlow(grid, u, du), MeasureFlow(grid, m, dm), batch.iterations,
                       res, bool(_is_monotone(spec)))


def mfg_residual(spec, sol):
    """Sup-norm central-difference residuals of the HJB and KFP lines."""
    return _two_line_residual(spec, sol.grid, sol.u.u, sol.m.m)


def uniqueness_gap(spec, t0, m0, **kw):
    """Sup distance between solutions started from ``m == m0`` and ``m == uniform``.

    Non-monotone models may legitimately report a positive gap.
    """
    a = solve_mfg(spec, t0, m0, **kw)
    b = solve_mfg(spec, t0, m0, m_init="uniform", **kw)
    return max(float(np.max(np.abs(a.u.u - b.u.u))), float(np.max(np.abs(a.m.m - b.m.m))))


def a_priori_check(spec, m0a, m0b, t0=0.0, **kw):
    """Sup distances of two solutions and their ratio to the initial gap."""
    m0a = simplex_point(m0a)
    m0b = simplex_point(m0b)
    gap = float(np.linalg.norm(m0a - m0b))
    if gap == 0.0:
        return 0.0, 0.0, 0.0
    a = solve_mfg(spec, t0, m0a, **kw)
    b = solve_mfg(spec, t0, m0b, **kw)
    du = float(np.max(np.abs(a.u.u - b.u.u)))
    dm = float(np.max(np.linalg.norm(a.m.m - b.m.m, axis=-1)))
    return du, dm, max(du, dm) / gap

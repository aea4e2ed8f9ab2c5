"""N-player Nash system: full joint-state tensor and the exchangeable counts form.

Player ``i`` at joint state ``x`` solves::

    dv^i/dt = H(x_i, Delta^i v^i) - sum_{j != i} alpha*(x_j, Delta^j v^j) . Delta^j v^i
              - F(x_i, m^{N,i}_x),          v^i(T) = G(x_i, m^{N,i}_x)

where ``m^{N,i}_x`` is the empirical measure of the other ``N - 1`` players.
By symmetry ``v^i(x) = w(x_i, n)`` with ``n`` the occupation counts of the
others; in these variables the sum over ``j`` collapses to a sum over occupied
states weighted by their counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import multinomial

from .errors import DivergenceError, InputError, SizeGuardError
from .master import MasterField, SimplexGrid, build_master_field
from .mfg import TimeGrid, solve_mfg
from .model import delta, simplex_point

SIZE_GUARD = 10**6


def _check_N(N):
    if int(N) != N or N < 2:
        raise InputError("N >= 2 required: the others' empirical measure needs N - 1 >= 1",
                         op="nplayer", context={"N": N})
    return int(N)


def _rk4_backward(rhs, y_T, grid, op):
    n, h = grid.n_steps, grid.dt
    out = np.empty((n + 1,) + y_T.shape)
    out[n] = y_T
    y = y_T
    for k in range(n - 1, -1, -1):
        k1 = rhs(y)
        k2 = rhs(y - 0.5 * h * k1)
        k3 = rhs(y - 0.5 * h * k2)
        k4 = rhs(y - h * k3)
        y = y - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(y).all():
            raise DivergenceError(f"non-finite values at time node {k}", op=op,
                                  context={"time_node": k})
        out[k] = y
    return out


# ---------------------------------------------------------------------------
# full tensor

@dataclass(frozen=True)
class FullTensorValue:
    """``v[t, i, idx]`` with joint state ``idx = sum_i x_i d^i``."""

    times: TimeGrid
    N: int
    d: int
    v: np.ndarray

    def joint_states(self):
        return joint_digits(self.N, self.d)


def joint_digits(N, d):
    """``[idx, i]`` = state of player ``i`` in joint index ``idx``."""
    idx = np.arange(d**N)
    return (idx[:, None] // d ** np.arange(N)[None, :]) % d


def _full_tables(N, d):
    digits = joint_digits(N, d)
    J = d**N
    idx = np.arange(J)
    pw = d ** np.arange(N)
    # repl[j, idx, z]: joint index with player j moved to z
    repl = idx[None, :, None] + (np.arange(d)[None, None, :] - digits.T[:, :, None]) * pw[:, None, None]
    # others' empirical measure seen by each player
    onehot = np.eye(d)[digits]  # (J, N, d)
    total = onehot.sum(axis=1)
    m_others = (total[:, None, :] - onehot) / (N - 1)  # (J, N, d)
    return digits, repl, m_others


def full_tensor_rhs(spec, N):
    """Right-hand side ``v -> dv/dt`` on arrays ``(N, d^N)``."""
    d = spec.d
    digits, repl, m_others = _full_tables(N, d)
    states_i = digits.T  # (N, J)
    F_run = np.take_along_axis(spec.F(m_others), digits[..., None], axis=-1)[..., 0].T  # (N, J)
    eye = np.eye(d, dtype=bool)
    own_mask = ~eye[states_i]  # (N, J, d): z != x_j
    rows = np.arange(N)

    def rhs(v):
        # moves[i, j, idx, z] = v^i(x with player j at z)
        moves = v[:, repl]
        dv = moves - v[:, None, :, None]
        own = dv[rows, rows]  # Delta^i v^i: (N, J, d)
        ham = spec.hamiltonian(states_i, own)
        alpha = spec.alpha_star(states_i, own) * own_mask  # (N=j, J, d)
        drift = np.einsum("jaz,ijaz->ia", alpha, dv)
        self_term = np.einsum("iaz,iaz->ia", alpha, own)
        return ham - (drift - self_term) - F_run

    terminal = np.take_along_axis(spec.G(m_others), digits[..., None], axis=-1)[..., 0].T
    return rhs, terminal


def solve_full_tensor(spec, N, *, dt=None):
    """Backward RK4 on the ``N d^N`` coupled value equations."""
    N = _check_N(N)
    size = N * spec.d**N
    if size > SIZE_GUARD:
        raise SizeGuardError(f"N d^N = {size} exceeds the guard {SIZE_GUARD}",
                             op="solve_full_tensor", context={"unknowns": size})
    grid = TimeGrid.with_step(0.0, spec.T, 1e-3 * spec.T if dt is None else dt)
    rhs, terminal = full_tensor_rhs(spec, N)
    v = _rk4_backward(rhs, terminal, grid, "solve_full_tensor")
    return FullTensorValue(grid, N, spec.d, v)


# ---------------------------------------------------------------------------
# counts representation

@dataclass(frozen=True)
class CountsValue:
    """``w[t, x, k]``: value of a player at ``x`` when the others occupy node ``k``
    of ``SimplexGrid(d, N - 1)`` (integer counts ``lattice.counts[k]``)."""

    times: TimeGrid
    N: int
    lattice: SimplexGrid
    w: np.ndarray

    def at_time(self, t):
        s = np.clip((t - self.times.t0) / self.times.dt, 0, self.times.n_steps)
        k = min(int(s), self.times.n_steps - 1)
        f = s - k
        return (1 - f) * self.w[k] + f * self.w[k + 1]

    def to_full(self):
        """Values ``(n+1, N, d^N)`` in the joint-state layout."""
        d = self.lattice.d
        digits = joint_digits(self.N, d)
        onehot = np.eye(d, dtype=np.int64)[digits]
        others = onehot.sum(axis=1)[:, None, :] - onehot  # (J, N, d)
        ranks = np.array([[self.lattice.rank(c) for c in row] for row in others])
        return self.w[:, digits, ranks].transpose(0, 2, 1)


class CountsDynamics:
    """Index tables and right-hand side of the counts-reduced system."""

    def __init__(self, spec, N):
        self.spec = spec
        self.N = N
        d = spec.d
        self.lattice = SimplexGrid(d, N - 1)
        self.counts = self.lattice.counts
        shift = self.lattice.shift_table()  # [k, to, from]
        self.shift = shift
        P = self.lattice.size
        occ = self.counts > 0  # (P, y')
        self.occ = occ
        # node seen by another player at y' when we sit at x: shift[k, x, y']
        self.view = np.where(occ[:, None, :], shift, 0)  # (P, x, y')
        # node after another player moves y' -> z: shift[k, z, y']
        self.dest = np.where(occ[:, :, None], np.swapaxes(shift, 1, 2), 0)  # (P, y', z)
        self.weight = self.counts * occ  # n_{y'}
        m = self.counts / (N - 1)
        self.F_run = spec.F(m)  # (P, x)
        self.terminal = spec.G(m)
        self.states = np.arange(d)
        self.offdiag = ~np.eye(d, dtype=bool)

    def other_rates(self, w):
        """``[k, x, y', z]``: rate of a player at ``y'`` jumping to ``z`` (``z != y'``)."""
        # p_z = w(z, view) - w(y', view) with w laid out (P, d)
        wv = w[self.view]  # (P, x, y', d)
        y = self.states
        p = wv - wv[:, :, y, y][..., None]
        alpha = self.spec.alpha_star(y[None, None, :], p)
        return alpha * self.offdiag[None, None]

    def rhs(self, w):
        spec = self.spec
        ham = spec.row_hamiltonian(w)
        alpha = self.other_rates(w)
        jump = w[self.dest] - w[:, None, None, :]  # (P, y', z, x)
        drift = np.einsum("ky,kxyz,kyzx->kx", self.weight, alpha, jump)
        return ham - drift - self.F_run

    def own_rates(self, w):
        return self.spec.alpha_star(self.states[None, :], delta(w))


def solve_counts_reduced(spec, N, *, dt=None):
    """Backward RK4 on ``w(t, x, n)`` for all counts ``n`` of the other players."""
    N = _check_N(N)
    size = spec.d * math.comb(N + spec.d - 2, spec.d - 1)
    if size > SIZE_GUARD:
        raise SizeGuardError(f"{size} unknowns exceed the guard {SIZE_GUARD}",
                             op="solve_counts_reduced", context={"unknowns": size})
    dyn = CountsDynamics(spec, N)
    grid = TimeGrid.with_step(0.0, spec.T, 1e-3 * spec.T if dt is None else dt)
    w = _rk4_backward(dyn.rhs, dyn.terminal, grid, "solve_counts_reduced")
    return CountsValue(grid, N, dyn.lattice, np.swapaxes(w, 1, 2))


class NashFeedback:
    """Equilibrium rates ``alpha*(x, Delta w(t, ., n))`` from a counts solution."""

    def __init__(self, spec, value: CountsValue):
        self.spec = spec
        self.value = value
        self.N = value.N
        self.lattice = value.lattice

    def rate_table(self, t):
        """``[x, k, z]`` rates at time ``t`` (linear interpolation in time)."""
        w = self.value.at_time(t)  # (d, P)
        return self.spec.alpha_star(self.spec.states[:, None], delta(w.T).swapaxes(0, 1))

    def rates(self, t, x, k):
        return self.rate_table(t)[x, k]


# ---------------------------------------------------------------------------
# policy evaluation and the Nash gap

def policy_value(spec, value: CountsValue, beta, *, dt=None):
    """Exact cost of player 0 using constant rates ``beta[x]`` while the others
    play the equilibrium; ``beta`` has shape ``(d, d)`` (row ``x`` = rates from ``x``).

    Returns the value table ``(n+1, d, P)`` on the counts lattice.
    """
    N = value.N
    dyn = CountsDynamics(spec, N)
    grid = value.times
    beta = np.asarray(beta, dtype=float)
    if np.any(beta < spec.kappa - 1e-12) or np.any(beta > spec.M_bound + 1e-12):
        raise InputError("deviation rates leave the control box", op="policy_value")
    d = spec.d
    b_off = beta * dyn.offdiag
    run_L = np.array([spec.lagrangian(x, beta[x]) for x in range(d)])
    w_nash = np.swapaxes(value.w, 1, 2)  # (n+1, P, d)

    def make_rhs(k_time):
        def rhs(J, wn):
            alpha = dyn.other_rates(wn)
            jump = J[dyn.dest] - J[:, None, None, :]
            drift = np.einsum("ky,kxyz,kyzx->kx", dyn.weight, alpha, jump)
            own = np.einsum("xz,kxz->kx", b_off, delta(J))
            return -own - run_L[None, :] - drift - dyn.F_run
        return rhs

    n, h = grid.n_steps, grid.dt
    J = dyn.terminal.copy()
    out = np.empty((n + 1,) + J.shape)
    out[n] = J
    rhs = make_rhs(None)
    for k in range(n - 1, -1, -1):
        w1, w0 = w_nash[k + 1], w_nash[k]
        wm = 0.5 * (w0 + w1)
        k1 = rhs(J, w1)
        k2 = rhs(J - 0.5 * h * k1, wm)
        k3 = rhs(J - 0.5 * h * k2, wm)
        k4 = rhs(J - h * k3, w0)
        J = J - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k] = J
    return np.swapaxes(out, 1, 2)


@dataclass(frozen=True)
class NashGapResult:
    max_gap: float
    std_err: float
    gaps: np.ndarray
    std_errs: np.ndarray
    deviations: np.ndarray


def nash_gap_probe(spec, N, deviations, rng_seed, *, paths=10**5, value=None, m0=None,
                   dt=None):
    """Monte Carlo check that no constant unilateral deviation beats the equilibrium.

    Player 0 switches to random constant rates in the control box; the others
    keep the equilibrium feedback.  Nash and deviated runs share the same
    noise.  Returns the largest ``J(Nash) - J(deviation)`` with its standard
    error; a Nash equilibrium keeps it within a few standard errors of zero.
    """
    from .sim import simulate_game_costs  # local: sim depends on this module's types

    N = _check_N(N)
    if value is None:
        value = solve_counts_reduced(spec, N, dt=dt)
    d = spec.d
    m0 = np.full(d, 1.0 / d) if m0 is None else simplex_point(m0)
    rng = np.random.default_rng(rng_seed)
    devs = rng.uniform(spec.kappa, spec.M_bound, size=(int(deviations), d, d))
    # the own coordinate never fires; give it the cost-free rate
    rest = spec.alpha_star(spec.states, np.zeros((d, d)))
    devs[:, spec.states, spec.states] = rest[spec.states, spec.states]
    gaps, ses = [], []
    nash_feed = NashFeedback(spec, value)
    for beta in devs:
        diff = simulate_game_costs(spec, nash_feed, beta, N, paths, rng_seed, m0)
        gaps.append(diff.mean())
        ses.append(diff.std(ddof=1) / math.sqrt(len(diff)))
    gaps = np.array(gaps)
    ses = np.array(ses)
    if len(gaps) == 0:
        return NashGapResult(0.0, 0.0, gaps, ses, devs)
    i = int(np.argmax(gaps))
    return NashGapResult(float(gaps[i]), float(ses[i]), gaps, ses, devs)


# ---------------------------------------------------------------------------
# comparison with the master field

def lattice_master_field(spec, N, times, *, dt=None, with_derivatives=True, **kw):
    """Master field on the lattice of others' empirical measures ``n / (N - 1)``."""
    return build_master_field(spec, SimplexGrid(spec.d, N - 1), times, dt=dt,
                              dmu_nodes="all" if with_derivatives else "none",
                              time_derivative=with_derivatives, **kw)


def projection_residual(spec, field: MasterField, N):
    """Residual of ``u(t, x, n) = U(t, x, n / (N - 1))`` in the N-player system and
    the first-order expansion remainder of its differences.

    ``field`` must live on ``SimplexGrid(d, N - 1)`` with time derivatives and
    measure derivatives at all nodes.
    """
    N = _check_N(N)
    if field.grid.n != N - 1 or field.dtU is None:
        raise InputError("field must be tabulated on the (N-1)-lattice with time derivatives",
                         op="projection_residual")
    dyn = CountsDynamics(spec, N)
    r_sup = 0.0
    tau_sup = 0.0
    d = spec.d
    for j in range(len(field.times.nodes)):
        u = field.U[j]  # (P, d)
        r = -field.dtU[j] + dyn.rhs(u)
        r_sup = max(r_sup, float(np.max(np.abs(r))))
        D1 = field.D1[j]  # (P, x, z)
        # tau[k, x, y', z] = u(dest, x) - u(k, x) - (D1_z - D1_y')/(N-1)
        jump = u[dyn.dest] - u[:, None, None, :]  # (P, y', z, x)
        lin = (D1[:, :, None, :] - D1[:, :, :, None]) / (N - 1)  # (P, x, y', z)
        tau = jump.transpose(0, 3, 1, 2) - lin
        mask = dyn.occ[:, None, :, None] & np.ones((1, d, 1, d), dtype=bool)
        vals = np.abs(tau[mask])
        if np.isnan(vals).any():
            raise InputError("field lacks measure derivatives at some nodes",
                             op="projection_residual")
        tau_sup = max(tau_sup, float(vals.max(initial=0.0)))
    return r_sup, tau_sup


def theorem1_gap(spec, N, t0=0.0, m0=None, *, value=None, dt=None, mfg_tol=1e-12):
    """Gaps between the N-player values and the master field at time ``t0``.

    ``avg_gap`` is the worst, over joint states, player average of
    ``|v^i(t0, x) - U(t0, x_i, m^N_x)|``.  ``l1_gap`` compares the
    multinomial average of ``w(t0, ., n)`` under i.i.d. ``m0`` initial states
    with ``U(t0, ., m0)`` in ``L1(m0)``.
    """
    N = _check_N(N)
    d = spec.d
    m0 = np.full(d, 1.0 / d) if m0 is None else simplex_point(m0)
    if value is None:
        value = solve_counts_reduced(spec, N, dt=dt)
    k0 = value.times.index_of(t0)
    if abs(value.times.nodes[k0] - t0) > 1e-12:
        raise InputError("t0 must be a node of the N-player time grid", op="theorem1_gap")
    w0 = value.w[k0]  # (d, P)
    lat = value.lattice
    dt_mfg = value.times.dt
    full = SimplexGrid(d, N)
    times = TimeGrid(t0, spec.T, 1) if t0 < spec.T else TimeGrid(t0, spec.T, 0)
    field = build_master_field(spec, full, times, dt=dt_mfg, dmu_nodes="none",
                               time_derivative=False, tol=mfg_tol)
    U0 = field.U[0]  # (P_full, d)
    avg = 0.0
    for K_rank, K in enumerate(full.counts):
        tot = 0.0
        for y in range(d):
            if K[y] == 0:
                continue
            n = K.copy()
            n[y] -= 1
            tot += K[y] * abs(w0[y, lat.rank(n)] - U0[K_rank, y])
        avg = max(avg, tot / N)
    probs = multinomial.pmf(lat.counts, N - 1, m0)
    w_bar = w0 @ probs
    sol = solve_mfg(spec, t0, m0, tol=mfg_tol, dt=dt_mfg)
    l1 = float(np.sum(m0 * np.abs(w_bar - sol.u.u[0])))
    return avg, l1

"""Exact simulation of the controlled jump dynamics and coupled systems.

Each player carries a Poisson stream of marks ``(time, coordinate y, level)``
with total rate ``d * M``, uniform coordinate and level uniform on
``[0, M]``.  A player at ``x`` jumps to ``y`` at a mark when ``y != x`` and
``level < rate_y``; this thinning is exact for rates bounded by ``M``.
Systems driven by the same streams are coupled synchronously.

Streams come from counter-based generators keyed by (seed, player, block of
``BLOCK`` paths), so path ``p`` of player ``i`` is the same whatever the total
number of paths or players requested.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .mfg import MfgSolution, hermite_mid
from .model import simplex_point

BLOCK = 1000
INIT_KEY = 0
NOISE_KEY = 1


def _generator(seed, *key):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class NoiseStream:
    """Marks of one player for a block of ``BLOCK`` paths.

    ``path[k]`` is the path of mark ``k``; within a path, times increase.
    """

    seed: int
    player: int
    block: int
    d: int
    M: float
    T: float
    path: np.ndarray
    time: np.ndarray
    coord: np.ndarray
    level: np.ndarray

    @classmethod
    def generate(cls, seed, player, block, d, M, T, take=BLOCK):
        """Marks of the first ``take`` paths of the block (a prefix of the full block)."""
        rng = _generator(seed, NOISE_KEY, player, block)
        count = rng.poisson(d * M * T, size=BLOCK)[:take]
        total = int(count.sum())
        path = np.repeat(np.arange(take), count)
        # one row of uniforms per mark, so any prefix of paths uses a prefix of the draws
        u = rng.random((total, 3))
        time = u[:, 0] * T
        coord = np.minimum((u[:, 1] * d).astype(np.int64), d - 1)
        level = u[:, 2] * M
        order = np.lexsort((time, path))
        return cls(seed, player, block, d, M, T, path[order], time[order], coord[order],
                   level[order])

    def for_path(self, p):
        sel = self.path == p
        return self.time[sel], self.coord[sel], self.level[sel]


def simulate_system(feedback, noise, z0, T, path=0):
    """Single-player path driven by ``noise`` (a :class:`NoiseStream`).

    ``feedback(t, x)`` returns the rate vector used at time ``t`` from state
    ``x``.  Returns jump times and the state after each jump (first entry:
    time 0, ``z0``).
    """
    times, coords, levels = noise.for_path(path)
    x = int(z0)
    out_t, out_x = [0.0], [x]
    for t, y, lev in zip(times, coords, levels):
        if t > T:
            break
        rate = np.asarray(feedback(t, x), dtype=float)
        if np.any(rate < -1e-12) or np.any(rate > noise.M + 1e-12):
            raise InputError("feedback rate outside the control box", op="simulate_system",
                             context={"t": float(t), "state": x})
        if y != x and lev < rate[y]:
            x = int(y)
            out_t.append(float(t))
            out_x.append(x)
    return np.array(out_t), np.array(out_x)


# ---------------------------------------------------------------------------
# feedback policies evaluated for many paths at once

def counts_rank_table(lattice):
    """Lookup from the radix-``(n+1)`` code of the first ``d - 1`` counts to node rank."""
    n, d = lattice.n, lattice.d
    base = (n + 1) ** np.arange(d - 1)
    lut = np.full((n + 1) ** (d - 1), -1, dtype=np.int64)
    lut[lattice.counts[:, :-1] @ base] = np.arange(lattice.size)
    return lut, base


class NashPolicy:
    """Equilibrium rates from a counts-reduced value (time-linear interpolation)."""

    def __init__(self, spec, value):
        self.spec = spec
        self.w = value.w
        self.grid = value.times
        self.lut, self.base = counts_rank_table(value.lattice)

    def vectors(self, t, others):
        rank = self.lut[others[:, :-1] @ self.base]
        s = np.clip((t - self.grid.t0) / self.grid.dt, 0, self.grid.n_steps)
        k = np.minimum(s.astype(np.int64), self.grid.n_steps - 1)
        f = (s - k)[:, None]
        states = np.arange(self.spec.d)[None, :]
        return (1 - f) * self.w[k[:, None], states, rank[:, None]] + \
            f * self.w[k[:, None] + 1, states, rank[:, None]]

    def rates(self, t, x, others, player):
        vals = self.vectors(t, others)
        p = vals - vals[np.arange(len(x)), x][:, None]
        return self.spec.alpha_star(x, p)


class MasterPolicy:
    """Rates ``alpha*(x, Delta^x U(t, x, n / (N - 1)))`` from a lattice master field."""

    def __init__(self, spec, field):
        self.spec = spec
        spline = field.spline()
        self.breaks = spline.x
        self.coef = spline.c  # (4, intervals, nodes, d)
        self.lut, self.base = counts_rank_table(field.grid)

    def vectors(self, t, others):
        rank = self.lut[others[:, :-1] @ self.base]
        i = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, len(self.breaks) - 2)
        s = (t - self.breaks[i])[:, None]
        c = self.coef[:, i, rank]  # (4, P, d)
        return ((c[0] * s + c[1]) * s + c[2]) * s + c[3]

    def rates(self, t, x, others, player):
        vals = self.vectors(t, others)
        p = vals - vals[np.arange(len(x)), x][:, None]
        return self.spec.alpha_star(x, p)


class LimitPolicy:
    """Rates ``alpha*(x, Delta^x u(t))`` along the MFG value flow."""

    def __init__(self, spec, sol: MfgSolution):
        self.spec = spec
        self.grid = sol.grid
        self.u = sol.u.u
        self.du = sol.u.du

    def vectors(self, t):
        g = self.grid
        s = np.clip((t - g.t0) / g.dt, 0, g.n_steps)
        k = np.minimum(s.astype(np.int64), g.n_steps - 1)
        f = (s - k)[:, None]
        h = g.dt
        u0, u1, d0, d1 = self.u[k], self.u[k + 1], self.du[k], self.du[k + 1]
        # cubic Hermite on [t_k, t_k+1]
        h00 = 2 * f**3 - 3 * f**2 + 1
        h10 = f**3 - 2 * f**2 + f
        h01 = -2 * f**3 + 3 * f**2
        h11 = f**3 - f**2
        return h00 * u0 + h10 * h * d0 + h01 * u1 + h11 * h * d1

    def rates(self, t, x, others, player):
        vals = self.vectors(t)
        p = vals - vals[np.arange(len(x)), x][:, None]
        return self.spec.alpha_star(x, p)


class ConstantPolicy:
    def __init__(self, rates):
        self.table = np.asarray(rates, dtype=float)

    def rates(self, t, x, others, player):
        return self.table[x]


class DeviationPolicy:
    """``deviant`` for one player, ``base`` for everybody else."""

    def __init__(self, base, deviant, player=0):
        self.base = base
        self.deviant = deviant
        self.player = player

    def rates(self, t, x, others, player):
        out = np.array(self.base.rates(t, x, others, player), dtype=float, copy=True)
        sel = player == self.player
        if sel.any():
            out[sel] = self.deviant.rates(t[sel], x[sel], others[sel], player[sel])
        return out


# ---------------------------------------------------------------------------
# block engine

def initial_states(seed, block, N, m0, mode):
    d = len(m0)
    if mode == "deterministic":
        counts = np.floor(N * m0).astype(int)
        rest = N - counts.sum()
        order = np.argsort(-(N * m0 - counts), kind="stable")
        counts[order[:rest]] += 1
        row = np.repeat(np.arange(d), counts)
        return np.broadcast_to(row, (BLOCK, N)).copy()
    if mode != "iid":
        raise InputError(f"unknown initial mode {mode!r}", op="simulate")
    rng = _generator(seed, INIT_KEY, block)
    return rng.choice(d, p=m0, size=(BLOCK, N))


def merged_events(seed, block, N, d, M, T, checkpoints=None, take=BLOCK):
    """All players' marks for a block, merged per path and padded with ``inf``.

    Returns ``(time, player, coord, level)`` arrays of shape ``(take, E)``;
    checkpoint pseudo-events carry player ``-1``.
    """
    parts = [NoiseStream.generate(seed, i, block, d, M, T, take) for i in range(N)]
    path = np.concatenate([s.path for s in parts])
    time = np.concatenate([s.time for s in parts])
    coord = np.concatenate([s.coord for s in parts])
    level = np.concatenate([s.level for s in parts])
    player = np.concatenate([np.full(len(s.path), i) for i, s in enumerate(parts)])
    if checkpoints is not None and len(checkpoints):
        cp = np.asarray(checkpoints, dtype=float)
        path = np.concatenate([path, np.repeat(np.arange(take), len(cp))])
        time = np.concatenate([time, np.tile(cp, take)])
        coord = np.concatenate([coord, np.full(take * len(cp), -1)])
        level = np.concatenate([level, np.full(take * len(cp), np.inf)])
        player = np.concatenate([player, np.full(take * len(cp), -1)])
    order = np.lexsort((player, time, path))
    path, time, coord, level, player = (a[order] for a in (path, time, coord, level, player))
    per = np.bincount(path, minlength=take)
    E = int(per.max(initial=0))
    start = np.concatenate([[0], np.cumsum(per)[:-1]])
    slot = np.arange(len(path)) - start[path]
    T_ = np.full((take, E), np.inf)
    P_ = np.full((take, E), -1, dtype=np.int64)
    C_ = np.full((take, E), -1, dtype=np.int64)
    L_ = np.full((take, E), np.inf)
    T_[path, slot] = time
    P_[path, slot] = player
    C_[path, slot] = coord
    L_[path, slot] = level
    return T_, P_, C_, L_


class _System:
    def __init__(self, policy, X0, d, M):
        self.policy = policy
        self.X = X0.copy()
        self.counts = np.stack([(X0 == z).sum(axis=1) for z in range(d)], axis=1)
        self.M = M

    def step(self, t, j, y, lev, active):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            return idx, None, None
        x = self.X[idx, j[idx]]
        others = self.counts[idx].copy()
        others[np.arange(len(idx)), x] -= 1
        rates = self.policy.rates(t[idx], x, others, j[idx])
        r = rates[np.arange(len(idx)), y[idx]]
        if np.any(r > self.M + 1e-9) or np.any(r < -1e-12):
            raise InputError("feedback rate outside the control box", op="simulate")
        jump = (y[idx] != x) & (lev[idx] < r)
        moved = idx[jump]
        if len(moved):
            src = x[jump]
            dst = y[moved]
            self.X[moved, j[moved]] = dst
            np.add.at(self.counts, (moved, src), -1)
            np.add.at(self.counts, (moved, dst), 1)
        return moved, x, rates


@dataclass
class TrajectoryBatch:
    """Per-path summaries of coupled systems; arrays have one row per path."""

    N: int
    paths: int
    seed: int
    systems: tuple
    terminal_counts: dict
    sup_player_gap: dict = field(default_factory=dict)
    sup_empirical_gap: dict = field(default_factory=dict)
    sup_lln: np.ndarray | None = None
    jumps: dict = field(default_factory=dict)
    recorded: dict | None = None


def run_systems(spec, policies, N, paths, seed, m0, *, T=None, initial="iid",
                limit_flow=None, pairs=(), checkpoints=201, record=False):
    """Drive several systems with shared noise and identical initial states.

    ``policies`` maps system names to policy objects.  ``pairs`` lists
    ``(a, b)`` name pairs whose player and empirical-measure gaps are tracked
    (sup over the event skeleton).  ``limit_flow`` (a ``MeasureFlow``) enables
    the distance of the first system's empirical measure to the limit flow.
    """
    d = spec.d
    M = spec.M_bound
    T = spec.T if T is None else T
    m0 = simplex_point(m0)
    names = tuple(policies)
    n_blocks = math.ceil(paths / BLOCK)
    cps = np.linspace(0.0, T, checkpoints) if limit_flow is not None and checkpoints else None
    term = {s: [] for s in names}
    jumps = {s: [] for s in names}
    gap_p = {p: [] for p in pairs}
    gap_e = {p: [] for p in pairs}
    lln = []
    rec = {s: [] for s in names} if record else None
    for b in range(n_blocks):
        take = min(BLOCK, paths - b * BLOCK)
        X0 = initial_states(seed, b, N, m0, initial)
        tt, pl, co, lv = merged_events(seed, b, N, d, M, T, cps, take)
        tt, pl, co, lv, X0 = tt[:take], pl[:take], co[:take], lv[:take], X0[:take]
        systems = {s: _System(policies[s], X0, d, M) for s in names}
        for s in names:
            systems[s].njump = np.zeros(take, dtype=np.int64)
        sup_p = {p: np.zeros((take, N)) for p in pairs}
        sup_e = {p: np.zeros(take) for p in pairs}
        sup_l = np.zeros(take)
        first = systems[names[0]]
        if limit_flow is not None:
            sup_l = _lln_dist(first.counts / N, limit_flow, np.zeros(take))
        if record:
            for s in names:
                rec[s].append([(np.zeros(take), X0.copy())])
        for e in range(tt.shape[1]):
            t = tt[:, e]
            j = pl[:, e]
            real = np.isfinite(t) & (j >= 0) & (t <= T)
            if limit_flow is not None:
                live = np.isfinite(t)
                if live.any():
                    tl = np.where(live, t, T)
                    sup_l = np.maximum(sup_l, np.where(live, _lln_dist(first.counts / N, limit_flow, tl), 0.0))
            for s in names:
                moved, _, _ = systems[s].step(t, j, co[:, e], lv[:, e], real)
                systems[s].njump[moved] += 1
                if record and len(moved):
                    rec[s][-1].append((t[moved].copy(), moved.copy(), j[moved].copy(),
                                       systems[s].X[moved, j[moved]].copy()))
            if limit_flow is not None:
                live = np.isfinite(t)
                if live.any():
                    tl = np.where(live, t, T)
                    sup_l = np.maximum(sup_l, np.where(live, _lln_dist(first.counts / N, limit_flow, tl), 0.0))
            if real.any():
                rows = np.nonzero(real)[0]
                for a, c in pairs:
                    A, C = systems[a], systems[c]
                    diff = np.abs(A.X[rows, j[rows]] - C.X[rows, j[rows]])
                    sup_p[(a, c)][rows, j[rows]] = np.maximum(sup_p[(a, c)][rows, j[rows]], diff)
                    emp = np.linalg.norm(A.counts[rows] - C.counts[rows], axis=1) / N
                    sup_e[(a, c)][rows] = np.maximum(sup_e[(a, c)][rows], emp)
        if limit_flow is not None:
            sup_l = np.maximum(sup_l, _lln_dist(first.counts / N, limit_flow, np.full(take, T)))
        for s in names:
            term[s].append(systems[s].counts.copy())
            jumps[s].append(systems[s].njump)
        for p in pairs:
            gap_p[p].append(sup_p[p].mean(axis=1))
            gap_e[p].append(sup_e[p])
        lln.append(sup_l)
    cat = np.concatenate
    return TrajectoryBatch(
        N, paths, seed, names,
        {s: cat(term[s]) for s in names},
        {p: cat(gap_p[p]) for p in pairs},
        {p: cat(gap_e[p]) for p in pairs},
        cat(lln) if limit_flow is not None else None,
        {s: cat(jumps[s]) for s in names},
        rec,
    )


def _lln_dist(emp, flow, t):
    return np.linalg.norm(emp - flow.at(t), axis=-1)


def run_coupled_batch(spec, field, nash, N, paths, seed, *, mfg=None, m0=None,
                      initial="iid", checkpoints=201):
    """Optimal (Y), projected (X) and i.i.d. limit (X~) systems on shared noise.

    ``field`` is the master field on the ``(N-1)``-lattice (for X), ``nash``
    the counts-reduced equilibrium value (for Y) and ``mfg`` the limit MFG
    solution from ``m0`` (for X~).
    """
    from .mfg import solve_mfg

    m0 = np.full(spec.d, 1.0 / spec.d) if m0 is None else simplex_point(m0)
    if mfg is None:
        mfg = solve_mfg(spec, 0.0, m0)
    if nash.N != N or field.grid.n != N - 1:
        raise InputError("N-player value and master field must match N", op="run_coupled_batch")
    policies = {"Y": NashPolicy(spec, nash), "X": MasterPolicy(spec, field),
                "Xt": LimitPolicy(spec, mfg)}
    return run_systems(spec, policies, N, paths, seed, m0, initial=initial,
                       limit_flow=mfg.m, pairs=(("Y", "X"), ("Y", "Xt")),
                       checkpoints=checkpoints)


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return float(x.mean()) if len(x) else 0.0, 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


def chaos_estimates(batch: TrajectoryBatch):
    """Means and standard errors of the coupling and chaos distances."""
    out = {}
    for key, name in ((("Y", "X"), "e_yx"), (("Y", "Xt"), "e_chaos")):
        if key in batch.sup_player_gap:
            out[name] = _mean_se(batch.sup_player_gap[key])
    if ("Y", "X") in batch.sup_empirical_gap:
        out["e_emp_yx"] = _mean_se(batch.sup_empirical_gap[("Y", "X")])
    if batch.sup_lln is not None:
        out["e_lln"] = _mean_se(batch.sup_lln)
    return out


def wasserstein_gap(x, y):
    """1-Wasserstein distance on states ``0..d-1`` with metric ``|i - j|``."""
    x = simplex_point(x)
    y = simplex_point(y)
    return float(np.sum(np.abs(np.cumsum(x - y)[:-1])))


def euclidean_gap(x, y):
    return float(np.linalg.norm(simplex_point(x) - simplex_point(y)))


# ---------------------------------------------------------------------------
# costs of one player under the equilibrium and under a deviation

def _running_cost_table(spec, value):
    """Cumulative ``int_0^t L(x, alpha*) + F(x, n/(N-1)) ds`` on the value grid."""
    from .model import delta

    w = value.w  # (n+1, d, P)
    d = spec.d
    rates = spec.alpha_star(np.arange(d)[None, :, None], np.swapaxes(delta(np.swapaxes(w, 1, 2)), 1, 2))
    L = np.stack([spec.lagrangian(x, rates[:, x]) for x in range(d)], axis=1)  # (n+1, d, P)
    F = spec.F(value.lattice.counts / (value.N - 1)).T[None]  # (1, d, P)
    g = L + F
    h = value.times.dt
    cum = np.zeros_like(g)
    cum[1:] = np.cumsum(0.5 * h * (g[1:] + g[:-1]), axis=0)
    return cum


def simulate_game_costs(spec, nash, beta, N, paths, seed, m0, *, initial="iid"):
    """Per-path ``J_0(equilibrium) - J_0(deviation)`` under common random numbers.

    ``nash`` is a :class:`~mfgfinite.nplayer.NashFeedback`; ``beta[x]`` are the
    constant rates of the deviating player 0.
    """
    value = nash.value
    d = spec.d
    T = spec.T
    beta = np.asarray(beta, dtype=float)
    base = NashPolicy(spec, value)
    policies = {"nash": base, "dev": DeviationPolicy(base, ConstantPolicy(beta), 0)}
    cum = _running_cost_table(spec, value)
    grid = value.times
    lut, radix = counts_rank_table(value.lattice)
    L_dev = np.array([float(spec.lagrangian(x, beta[x])) for x in range(d)])
    F_lat = spec.F(value.lattice.counts / (N - 1))  # (P, d)
    G_lat = spec.G(value.lattice.counts / (N - 1))

    def cum_at(t, x, rank):
        s = np.clip((t - grid.t0) / grid.dt, 0, grid.n_steps)
        k = np.minimum(s.astype(np.int64), grid.n_steps - 1)
        f = s - k
        return (1 - f) * cum[k, x, rank] + f * cum[k + 1, x, rank]

    m0 = simplex_point(m0)
    out = []
    for b in range(math.ceil(paths / BLOCK)):
        take = min(BLOCK, paths - b * BLOCK)
        X0 = initial_states(seed, b, N, m0, initial)[:take]
        tt, pl, co, lv = (a[:take] for a in merged_events(seed, b, N, d, spec.M_bound, T, None, take))
        sysd = {s: _System(policies[s], X0, d, spec.M_bound) for s in policies}
        cost = {s: np.zeros(take) for s in policies}
        last = {s: np.zeros(take) for s in policies}
        for e in range(tt.shape[1]):
            t = tt[:, e]
            real = np.isfinite(t) & (pl[:, e] >= 0) & (t <= T)
            j = pl[:, e]
            for s, S in sysd.items():
                # player 0's state or others' counts change only when someone jumps
                x0 = S.X[:, 0]
                others = S.counts.copy()
                others[np.arange(take), x0] -= 1
                rank = lut[others[:, :-1] @ radix]
                moved, _, _ = S.step(t, j, co[:, e], lv[:, e], real)
                if len(moved):
                    te = t[moved]
                    xm, rm = x0[moved], rank[moved]
                    cost[s][moved] += _segment_cost(s, cum_at, L_dev, F_lat, last[s][moved], te, xm, rm)
                    last[s][moved] = te
        for s, S in sysd.items():
            x0 = S.X[:, 0]
            others = S.counts.copy()
            others[np.arange(take), x0] -= 1
            rank = lut[others[:, :-1] @ radix]
            cost[s] += _segment_cost(s, cum_at, L_dev, F_lat, last[s], np.full(take, T), x0, rank)
            cost[s] += G_lat[rank, x0]
        out.append(cost["nash"] - cost["dev"])
    return np.concatenate(out)


def _segment_cost(system, cum_at, L_dev, F_lat, t_a, t_b, x, rank):
    if system == "nash":
        return cum_at(t_b, x, rank) - cum_at(t_a, x, rank)
    return (t_b - t_a) * (L_dev[x] + F_lat[rank, x])

"""Game data for finite-state mean field games.

A game lives on the state space ``{0, ..., d-1}`` (labels are shifted by one
with respect to the usual ``1..d`` notation), with controls in the box
``[kappa, M]^d``.  Every control vector carries an entry for the current
state too; that entry never moves the chain and only enters the Lagrangian.

All maps are vectorised: a state argument ``x`` is an integer array that
broadcasts against the leading axes of ``p`` (shape ``(..., d)``).
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import InputError, ModelConfigError

SIMPLEX_TOL = 1e-12


# ---------------------------------------------------------------------------
# simplex helpers

def simplex_point(weights, tol=SIMPLEX_TOL):
    """Validate and return a point of the probability simplex as a float array."""
    m = np.asarray(weights, dtype=float)
    if m.ndim != 1 or m.size < 2:
        raise InputError("simplex point must be a 1-d array with at least 2 entries",
                         op="simplex_point")
    if not np.all(np.isfinite(m)) or np.any(m < -tol) or abs(m.sum() - 1.0) > tol:
        raise InputError("weights must be nonnegative and sum to 1",
                         op="simplex_point", context={"weights": m.tolist()})
    return m


def tangent_vector(components, tol=SIMPLEX_TOL):
    """Validate a direction in the tangent space (zero coordinate sum)."""
    mu = np.asarray(components, dtype=float)
    if mu.ndim != 1 or not np.all(np.isfinite(mu)) or abs(mu.sum()) > tol:
        raise InputError("tangent vector must be finite and sum to 0",
                         op="tangent_vector", context={"components": mu.tolist()})
    return mu


def sample_simplex(rng, size, d):
    """Uniform samples on the simplex, shape ``(size, d)``."""
    return rng.dirichlet(np.ones(d), size=size)


def delta(u):
    """Finite differences ``[x, y] -> u_y - u_x`` for each own state ``x``.

    ``u`` has shape ``(..., d)``; the result has shape ``(..., d, d)``.
    """
    u = np.asarray(u)
    return u[..., None, :] - u[..., :, None]


# ---------------------------------------------------------------------------
# costs F(x, m), G(x, m)

class Cost:
    """A mean-field cost, evaluated for all states at once.

    ``cost(m)`` maps ``(..., d)`` measures to ``(..., d)`` values (one per
    state).  ``jacobian(m)[..., x, z]`` is the derivative of a smooth extension
    in ``m_z``; only its action on zero-sum directions is meaningful.
    """

    m_independent = False
    sup_norm = math.inf
    name = "cost"

    def __call__(self, m):
        raise NotImplementedError

    def jacobian(self, m):
        raise NotImplementedError

    def directional(self, m, mu):
        """Derivative along the tangent direction ``mu``: shape ``(..., d)``."""
        return np.einsum("...xz,...z->...x", self.jacobian(m), mu)

    def to_config(self):
        return self.name


class OwnMass(Cost):
    """``F(x, m) = m_x``; monotone in the Lasry-Lions sense."""

    sup_norm = 1.0
    name = "own_mass"

    def __call__(self, m):
        return np.array(m, dtype=float, copy=True)

    def jacobian(self, m):
        m = np.asarray(m, dtype=float)
        return np.broadcast_to(np.eye(m.shape[-1]), m.shape + (m.shape[-1],))

    def directional(self, m, mu):
        return np.broadcast_to(np.asarray(mu, dtype=float),
                               np.broadcast_shapes(np.shape(m), np.shape(mu))).copy()


class ZeroCost(Cost):
    m_independent = True
    sup_norm = 0.0
    name = "zero"

    def __call__(self, m):
        return np.zeros(np.shape(m))

    def jacobian(self, m):
        d = np.shape(m)[-1]
        return np.zeros(np.shape(m) + (d,))

    def directional(self, m, mu):
        return np.zeros(np.broadcast_shapes(np.shape(m), np.shape(mu)))


class StateCost(Cost):
    """A cost depending on the own state only: ``F(x, m) = c_x``."""

    m_independent = True

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=float)
        self.sup_norm = float(np.max(np.abs(self.weights)))
        self.name = "state"

    def __call__(self, m):
        return np.broadcast_to(self.weights, np.shape(m)).copy()

    def jacobian(self, m):
        d = np.shape(m)[-1]
        return np.zeros(np.shape(m) + (d,))

    def directional(self, m, mu):
        return np.zeros(np.broadcast_shapes(np.shape(m), np.shape(mu)))

    def to_config(self):
        return self.weights.tolist()


class CallableCost(Cost):
    """Wrap a user map ``fn(m) -> values``; Jacobian by central differences if absent."""

    def __init__(self, fn, jacobian=None, *, sup_norm=None, m_independent=False,
                 name="callable", fd_step=1e-6):
        self._fn = fn
        self._jac = jacobian
        self.m_independent = m_independent
        self.name = name
        self.fd_step = fd_step
        self.sup_norm = math.inf if sup_norm is None else float(sup_norm)

    def __call__(self, m):
        return np.asarray(self._fn(np.asarray(m, dtype=float)), dtype=float)

    def jacobian(self, m):
        if self._jac is not None:
            return np.asarray(self._jac(np.asarray(m, dtype=float)), dtype=float)
        m = np.asarray(m, dtype=float)
        d = m.shape[-1]
        cols = []
        for z in range(d):
            e = np.zeros(d)
            e[z] = self.fd_step
            cols.append((self(m + e) - self(m - e)) / (2 * self.fd_step))
        return np.stack(cols, axis=-1)


def make_cost(spec):
    """Build a cost from its config value: ``"own_mass"``, ``"zero"`` or a list."""
    if isinstance(spec, Cost):
        return spec
    if spec == "own_mass":
        return OwnMass()
    if spec == "zero":
        return ZeroCost()
    if isinstance(spec, (list, tuple)):
        return StateCost(spec)
    raise ValueError(f"unknown cost {spec!r}")


def monotonicity_gap(cost, m, m2):
    """``sum_x (F(x,m) - F(x,m2)) (m_x - m2_x)``; nonnegative for monotone costs."""
    m = np.asarray(m, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    return np.sum((cost(m) - cost(m2)) * (m - m2), axis=-1)


# ---------------------------------------------------------------------------
# games

class GameSpec:
    """Finite-state game data.

    Subclasses provide ``lagrangian``, ``hamiltonian`` and ``alpha_star``.
    Instances are treated as immutable once built.
    """

    separable = False

    def __init__(self, d, T, kappa, M_bound, F, G):
        if int(d) != d or d < 2:
            raise ModelConfigError("d must be an integer >= 2", op="GameSpec",
                                   context={"field": "d"})
        if not T > 0:
            raise ModelConfigError("T must be positive", op="GameSpec",
                                   context={"field": "T"})
        if not 0 < kappa < M_bound:
            raise ModelConfigError("need 0 < kappa < M", op="GameSpec",
                                   context={"field": "kappa" if not kappa > 0 else "M"})
        self.d = int(d)
        self.T = float(T)
        self.kappa = float(kappa)
        self.M_bound = float(M_bound)
        self.F = make_cost(F)
        self.G = make_cost(G)
        self._K = None

    @property
    def states(self):
        return np.arange(self.d)

    def lagrangian(self, x, alpha):
        raise NotImplementedError

    def hamiltonian(self, x, p):
        raise NotImplementedError

    def alpha_star(self, x, p):
        raise NotImplementedError

    def alpha_star_jac(self, x, p, step=1e-6):
        """``[..., z, w] = d alpha*_z / d p_w`` by central differences."""
        p = np.asarray(p, dtype=float)
        cols = []
        for w in range(self.d):
            e = np.zeros(self.d)
            e[w] = step
            cols.append((self.alpha_star(x, p + e) - self.alpha_star(x, p - e)) / (2 * step))
        return np.stack(cols, axis=-1)

    def lagrangian_sup(self, grid_n=5):
        pts = np.linspace(self.kappa, self.M_bound, grid_n)
        lattice = np.stack(np.meshgrid(*[pts] * self.d, indexing="ij"), -1).reshape(-1, self.d)
        return max(float(np.max(np.abs(self.lagrangian(x, lattice)))) for x in range(self.d))

    @property
    def p_bound(self):
        """Bound K on value differences, ``2 max(|G|, T (|F| + |L|))``."""
        if self._K is None:
            self._K = 2.0 * max(self.G.sup_norm,
                                self.T * (self.F.sup_norm + self.lagrangian_sup()))
        return self._K

    @property
    def costs_m_independent(self):
        return self.F.m_independent and self.G.m_independent

    def row_hamiltonian(self, u):
        """``H(x, Delta^x u)`` for every state ``x``: shape ``(..., d)``."""
        return self.hamiltonian(self.states, delta(u))

    def rate_matrix(self, u):
        """Optimal rate matrix for value vectors ``u`` (shape ``(..., d)``).

        Row ``x`` holds ``alpha*(x, Delta^x u)`` off the diagonal and minus the
        row sum on the diagonal.
        """
        gamma = self.alpha_star(self.states, delta(u))
        return _fix_diagonal(gamma)

    def rate_matrix_derivative(self, u, v):
        """Directional derivative of ``rate_matrix`` at ``u`` along ``v``."""
        jac = self.alpha_star_jac(self.states, delta(u))
        dgamma = np.einsum("...xzw,...xw->...xz", jac, delta(v))
        return _fix_diagonal(dgamma)

    def rate_matrix_jacobian(self, u):
        """``[..., y, z, w]``: derivative of ``rate_matrix(u)[y, z]`` in ``u_w``."""
        jac = self.alpha_star_jac(self.states, delta(u))
        unit = delta(np.eye(self.d))  # [w, y, k] = delta_{wk} - delta_{wy}
        out = np.einsum("...yzk,wyk->...yzw", jac, unit)
        idx = np.arange(self.d)
        out[..., idx, idx, :] = 0.0
        out[..., idx, idx, :] = -out.sum(axis=-2)
        return out

    def config(self):
        return {"d": self.d, "T": self.T, "kappa": self.kappa, "M": self.M_bound,
                "model": "custom", "F": self.F.to_config(), "G": self.G.to_config()}

    def __repr__(self):
        return f"{type(self).__name__}({self.config()})"


def _fix_diagonal(gamma):
    gamma = np.array(gamma, dtype=float, copy=True)
    d = gamma.shape[-1]
    idx = np.arange(d)
    gamma[..., idx, idx] = 0.0
    gamma[..., idx, idx] = -gamma.sum(axis=-1)
    return gamma


class QuadraticModel(GameSpec):
    """``L(alpha) = b |alpha - a|^2`` with ``a`` the box midpoint.

    The Hamiltonian splits into one term per coordinate, quadratic for
    ``|p_y| <= b (M - kappa)`` and linear outside.
    """

    separable = True

    def __init__(self, d=2, T=1.0, kappa=0.5, M_bound=1.5, b_coef=1.0,
                 F="own_mass", G="own_mass"):
        super().__init__(d, T, kappa, M_bound, F, G)
        if not b_coef > 0:
            raise ModelConfigError("b must be positive", op="QuadraticModel",
                                   context={"field": "b"})
        self.b_coef = float(b_coef)
        self.a_center = np.full(self.d, 0.5 * (self.kappa + self.M_bound))

    def lagrangian(self, x, alpha):
        alpha = np.asarray(alpha, dtype=float)
        val = self.b_coef * np.sum((alpha - self.a_center) ** 2, axis=-1)
        return np.broadcast_to(val, np.broadcast_shapes(np.shape(x), val.shape))

    def lagrangian_coord(self, x, y, alpha_y):
        return self.b_coef * (np.asarray(alpha_y, dtype=float) - self.a_center[y]) ** 2

    def lagrangian_sup(self, grid_n=5):
        return self.b_coef * self.d * (0.5 * (self.M_bound - self.kappa)) ** 2

    def alpha_star(self, x, p):
        p = np.asarray(p, dtype=float)
        alpha = np.clip(self.a_center - p / (2 * self.b_coef), self.kappa, self.M_bound)
        shape = np.broadcast_shapes(np.shape(x) + (self.d,), alpha.shape)
        return np.broadcast_to(alpha, shape)

    def hamiltonian(self, x, p):
        p = np.asarray(p, dtype=float)
        alpha = np.clip(self.a_center - p / (2 * self.b_coef), self.kappa, self.M_bound)
        val = np.sum(-alpha * p - self.b_coef * (alpha - self.a_center) ** 2, axis=-1)
        return np.broadcast_to(val, np.broadcast_shapes(np.shape(x), val.shape))

    def row_hamiltonian(self, u):
        # hot path of the backward sweeps: scalar centre, no broadcasting helpers
        u = np.asarray(u, dtype=float)
        p = u[..., None, :] - u[..., :, None]
        a = 0.5 * (self.kappa + self.M_bound)
        alpha = np.clip(a - p / (2 * self.b_coef), self.kappa, self.M_bound)
        return (-alpha * p - self.b_coef * (alpha - a) ** 2).sum(axis=-1)

    def alpha_star_jac(self, x, p, step=None):
        p = np.asarray(p, dtype=float)
        raw = self.a_center - p / (2 * self.b_coef)
        slope = np.where((raw > self.kappa) & (raw < self.M_bound),
                         -1.0 / (2 * self.b_coef), 0.0)
        jac = slope[..., :, None] * np.eye(self.d)
        shape = np.broadcast_shapes(np.shape(x) + (self.d, self.d), jac.shape)
        return np.broadcast_to(jac, shape)

    def config(self):
        cfg = super().config()
        cfg.update(model="quadratic", b=self.b_coef)
        return cfg


class CallableGame(GameSpec):
    """A user model given by callables; ``hamiltonian`` and ``alpha_star`` come together."""

    def __init__(self, d, T, kappa, M_bound, F, G, *, lagrangian, hamiltonian, alpha_star,
                 alpha_star_jac=None, lagrangian_coord=None):
        super().__init__(d, T, kappa, M_bound, F, G)
        self._L = lagrangian
        self._H = hamiltonian
        self._a = alpha_star
        self._jac = alpha_star_jac
        self._Lc = lagrangian_coord
        self.separable = lagrangian_coord is not None

    def lagrangian(self, x, alpha):
        return np.asarray(self._L(x, np.asarray(alpha, dtype=float)), dtype=float)

    def lagrangian_coord(self, x, y, alpha_y):
        return np.asarray(self._Lc(x, y, np.asarray(alpha_y, dtype=float)), dtype=float)

    def hamiltonian(self, x, p):
        return np.asarray(self._H(x, np.asarray(p, dtype=float)), dtype=float)

    def alpha_star(self, x, p):
        return np.asarray(self._a(x, np.asarray(p, dtype=float)), dtype=float)

    def alpha_star_jac(self, x, p, step=1e-6):
        if self._jac is not None:
            return np.asarray(self._jac(x, np.asarray(p, dtype=float)), dtype=float)
        return super().alpha_star_jac(x, p, step)


# ---------------------------------------------------------------------------
# configuration

_MODEL_FIELDS = {"d", "T", "kappa", "M", "model", "b", "F", "G"}
_REQUIRED = ("d", "T", "kappa", "M", "model", "b")


def model_from_dict(cfg):
    """Build a game from its JSON configuration; unknown fields are rejected."""
    if not isinstance(cfg, dict):
        raise ModelConfigError("model config must be a JSON object", op="load_model")
    for key in cfg:
        if key not in _MODEL_FIELDS:
            raise ModelConfigError(f"unknown field {key!r}", op="load_model",
                                   context={"field": key})
    for key in _REQUIRED:
        if key not in cfg:
            raise ModelConfigError(f"missing field {key!r}", op="load_model",
                                   context={"field": key})
    if cfg["model"] != "quadratic":
        raise ModelConfigError(f"unsupported model {cfg['model']!r}", op="load_model",
                               context={"field": "model"})
    for key in ("d", "T", "kappa", "M", "b"):
        val = cfg[key]
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            raise ModelConfigError(f"field {key!r} must be a finite number", op="load_model",
                                   context={"field": key})
    if int(cfg["d"]) != cfg["d"]:
        raise ModelConfigError("field 'd' must be an integer", op="load_model",
                               context={"field": "d"})
    costs = {}
    for key in ("F", "G"):
        val = cfg.get(key, "own_mass")
        if isinstance(val, list):
            if len(val) != cfg["d"] or not all(isinstance(v, (int, float)) for v in val):
                raise ModelConfigError(f"field {key!r}: state cost needs d numbers",
                                       op="load_model", context={"field": key})
        elif val not in ("own_mass", "zero"):
            raise ModelConfigError(f"field {key!r}: unknown cost {val!r}", op="load_model",
                                   context={"field": key})
        costs[key] = val
    try:
        return QuadraticModel(d=int(cfg["d"]), T=cfg["T"], kappa=cfg["kappa"],
                              M_bound=cfg["M"], b_coef=cfg["b"], F=costs["F"], G=costs["G"])
    except ModelConfigError as exc:
        exc.op = "load_model"
        raise


def load_model(path):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelConfigError(f"cannot read model file: {exc}", op="load_model",
                               context={"path": str(path)}) from exc
    return model_from_dict(cfg)


# ---------------------------------------------------------------------------
# checks

def _check_p(spec, p):
    p = np.asarray(p, dtype=float)
    if p.shape[-1:] != (spec.d,):
        raise InputError("p must have d components", op="alpha_star_eval")
    if not np.all(np.isfinite(p)):
        raise InputError("p must be finite", op="legendre_consistency_check",
                         context={"p": p.tolist()})
    return p


def gridded_hamiltonian(spec, x, p, grid_n):
    """Brute-force ``max over a grid_n^d lattice of {-alpha.p - L(x, alpha)}``.

    Separable models are maximised one coordinate at a time.
    """
    p = _check_p(spec, p)
    if grid_n < 2:
        raise InputError("grid_n must be >= 2", op="legendre_consistency_check")
    pts = np.linspace(spec.kappa, spec.M_bound, int(grid_n))
    if spec.separable:
        total = 0.0
        for y in range(spec.d):
            total += np.max(-pts * p[y] - spec.lagrangian_coord(x, y, pts))
        return float(total)
    if grid_n ** spec.d > 5_000_000:
        raise InputError("lattice too large for a non-separable model",
                         op="legendre_consistency_check")
    lattice = np.stack(np.meshgrid(*[pts] * spec.d, indexing="ij"), -1).reshape(-1, spec.d)
    return float(np.max(-lattice @ p - spec.lagrangian(x, lattice)))


def legendre_consistency_check(spec, x, p, grid_n=2001):
    """``|H(x,p) - gridded max|``; the gridded max may not exceed ``H`` beyond roundoff."""
    p = _check_p(spec, p)
    h = float(spec.hamiltonian(x, p))
    return abs(h - gridded_hamiltonian(spec, x, p, grid_n))


def alpha_star_eval(spec, x, p):
    p = _check_p(spec, p)
    alpha = np.asarray(spec.alpha_star(x, p), dtype=float)
    if np.any(alpha < spec.kappa - 1e-12) or np.any(alpha > spec.M_bound + 1e-12):
        raise InputError("alpha* left the control box", op="alpha_star_eval",
                         context={"alpha": alpha.tolist()})
    return alpha


def monotonicity_probe(spec, trials, rng_seed):
    """Smallest Lasry-Lions gap over random simplex pairs, for F and G together."""
    if trials < 1:
        raise InputError("trials must be >= 1", op="monotonicity_probe")
    rng = np.random.default_rng(rng_seed)
    m = sample_simplex(rng, trials, spec.d)
    m2 = sample_simplex(rng, trials, spec.d)
    return float(min(np.min(monotonicity_gap(spec.F, m, m2)),
                     np.min(monotonicity_gap(spec.G, m, m2))))

"""Fluctuation (CLT) and large-deviation objects around the MFG flow.

Fluctuations ``rho`` of the empirical measure evolve by the linear SDE
``d rho = A(t) rho dt + sigma(t) dW`` where ``A mu = Gamma^T mu + b(mu)``
differentiates ``m -> Gamma(t, m)^T m`` and ``sigma^2`` is the jump
covariance of the limit chain.  The large-deviation local cost ``Lambda``
of a velocity ``mu`` is an entropy-type infimum over jump fluxes; its dual
``Lambda0`` is a smooth concave maximization solved by Newton's method.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InputError, IntegrationError
from .master import derivative_along_flow
from .mfg import MeasureFlow, solve_mfg
from .model import simplex_point, tangent_vector

INF = math.inf


# ---------------------------------------------------------------------------
# rate matrices and CLT coefficients

class GammaMatrix:
    """``(t, m) -> Gamma(t, m)``, the optimal rate matrix read off the master field."""

    def __init__(self, spec, field):
        self.spec = spec
        self.field = field

    def __call__(self, t, m):
        U, _ = self.field.evaluate(t, m)
        return self.spec.rate_matrix(U)


def jump_covariance(gamma, m):
    """``sigma^2`` with ``sigma2_xy = -(m_x G_xy + m_y G_yx)`` off the diagonal
    and zero row sums."""
    m = np.asarray(m, dtype=float)
    flux = m[..., :, None] * gamma
    s = -(flux + np.swapaxes(flux, -1, -2))
    d = gamma.shape[-1]
    idx = np.arange(d)
    s[..., idx, idx] = 0.0
    s[..., idx, idx] = -s.sum(axis=-1)
    return s


def drift_operator(spec, U, D1, m):
    """Matrix ``A`` of ``mu -> Gamma^T mu + b(mu)`` with
    ``b(mu)_y = sum_x m_x dGamma_xy[mu]`` and ``dGamma`` the derivative of
    ``Gamma`` along ``mu`` through ``DmU``."""
    gamma = spec.rate_matrix(U)
    rj = spec.rate_matrix_jacobian(U)  # [x, y, z]
    B = np.einsum("...x,...xyz,...zw->...yw", m, rj, D1)
    return np.swapaxes(gamma, -1, -2) + B, gamma


def clt_coefficients(spec, field, t, m, mu):
    """Drift ``Gamma^T mu + b(mu)`` and jump covariance ``sigma^2`` at ``(t, m)``.

    ``field`` is anything with ``evaluate(t, m) -> (U, D1)``: a
    :class:`~mfgfinite.master.MasterField` at one of its nodes or a
    :class:`~mfgfinite.master.MasterEvaluator`.
    """
    m = simplex_point(m)
    if np.any(m <= 0):
        raise InputError("m must lie in the open simplex", op="clt_coefficients")
    mu = tangent_vector(mu)
    U, D1 = field.evaluate(t, m)
    if not np.isfinite(D1).all():
        raise InputError("no measure derivative available at this point", op="clt_coefficients")
    A, gamma = drift_operator(spec, U, D1, m)
    return A @ mu, jump_covariance(gamma, m)


def sigma_sqrt(sigma2, tol=1e-10):
    """Symmetric PSD square root by eigendecomposition."""
    s = np.asarray(sigma2, dtype=float)
    if np.max(np.abs(s - s.T), initial=0.0) > tol:
        raise InputError("matrix is not symmetric", op="sigma_sqrt")
    w, V = np.linalg.eigh(0.5 * (s + s.T))
    if w.min(initial=0.0) < -tol:
        raise InputError(f"matrix is indefinite (eigenvalue {w.min():.3e})", op="sigma_sqrt")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


@dataclass(frozen=True)
class FluctuationLaw:
    """Gaussian fluctuation law on the odd-free coarse grid ``times``."""

    times: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    drift: np.ndarray
    sigma2: np.ndarray


def evolve_fluctuation_law(spec, m0, cov0, *, mean0=None, mfg=None, dt=None):
    """Integrate ``dS = A S + S A^T + sigma^2`` and ``d mean = A mean`` along the MFG flow.

    Coefficients are evaluated on the MFG grid; RK4 runs with step ``2 dt``
    using odd nodes as midpoints.  ``A`` uses the measure derivative along
    the flow from the linearized system.
    """
    m0 = simplex_point(m0)
    d = spec.d
    cov0 = np.asarray(cov0, dtype=float)
    if cov0.shape != (d, d) or np.max(np.abs(cov0 - cov0.T)) > 1e-12 or \
            np.max(np.abs(cov0.sum(axis=1))) > 1e-10:
        raise InputError("cov0 must be symmetric with zero row sums", op="evolve_fluctuation_law")
    if mfg is None:
        dt = 1e-3 * spec.T if dt is None else dt
        n = max(2, 2 * int(round(spec.T / (2 * dt))))
        mfg = solve_mfg(spec, 0.0, m0, dt=spec.T / n)
    if mfg.grid.n_steps % 2:
        raise InputError("MFG grid needs an even number of steps", op="evolve_fluctuation_law")
    D1 = derivative_along_flow(spec, mfg)
    u, m = mfg.u.u, mfg.m.m
    A, gamma = drift_operator(spec, u, D1, m)
    s2 = jump_covariance(gamma, m)
    h = 2 * mfg.grid.dt
    cov = [cov0]
    mean = [np.zeros(d) if mean0 is None else tangent_vector(mean0)]

    def f_cov(S, Ak, Qk):
        return Ak @ S + S @ Ak.T + Qk

    for k in range(0, mfg.grid.n_steps, 2):
        S = cov[-1]
        a0, ah, a1 = A[k], A[k + 1], A[k + 2]
        q0, qh, q1 = s2[k], s2[k + 1], s2[k + 2]
        k1 = f_cov(S, a0, q0)
        k2 = f_cov(S + 0.5 * h * k1, ah, qh)
        k3 = f_cov(S + 0.5 * h * k2, ah, qh)
        k4 = f_cov(S + h * k3, a1, q1)
        S = S + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        S = 0.5 * (S + S.T)
        low = np.linalg.eigvalsh(S).min()
        if low < -1e-10:
            raise IntegrationError(f"covariance lost positivity ({low:.3e})",
                                   op="evolve_fluctuation_law")
        cov.append(S)
        r = mean[-1]
        l1 = a0 @ r
        l2 = ah @ (r + 0.5 * h * l1)
        l3 = ah @ (r + 0.5 * h * l2)
        l4 = a1 @ (r + h * l3)
        mean.append(r + (h / 6.0) * (l1 + 2 * l2 + 2 * l3 + l4))
    times = mfg.grid.nodes[::2]
    return FluctuationLaw(times, np.array(mean), np.array(cov), A[::2], s2[::2])


def iid_initial_covariance(m0):
    """Covariance of the multinomial fluctuation of i.i.d. initial states."""
    m0 = simplex_point(m0)
    return np.diag(m0) - np.outer(m0, m0)


def sample_fluctuation_paths(law: FluctuationLaw, n_paths, seed, *, rho0=None):
    """Euler-Maruyama paths of the fluctuation SDE on ``law.times``."""
    rng = np.random.default_rng(seed)
    d = law.cov.shape[-1]
    rho = np.zeros((n_paths, d)) if rho0 is None else np.broadcast_to(rho0, (n_paths, d)).copy()
    out = [rho.copy()]
    for k in range(len(law.times) - 1):
        h = law.times[k + 1] - law.times[k]
        sig = sigma_sqrt(law.sigma2[k])
        rho = rho + h * rho @ law.drift[k].T + math.sqrt(h) * rng.standard_normal((n_paths, d)) @ sig.T
        out.append(rho.copy())
    return np.array(out)


# ---------------------------------------------------------------------------
# large deviations

def local_rate(r):
    """``r log r - r + 1`` for ``r > 0``, ``1`` at ``0`` and ``+inf`` for ``r < 0``."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)) - r + 1.0, 1.0)
    val = np.where(r < 0, INF, val)
    return float(val) if val.ndim == 0 else val


@dataclass(frozen=True)
class RateEval:
    lambda_val: np.ndarray
    psi_val: float
    big_lambda: float
    big_lambda_dual: float
    theta_opt: np.ndarray
    q_opt: np.ndarray
    feasibility: float

    @property
    def duality_gap(self):
        return abs(self.big_lambda - self.big_lambda_dual)


def _fluxes(gamma, m, theta):
    base = m[:, None] * gamma
    np.fill_diagonal(base, 0.0)
    return base * np.exp(theta[None, :] - theta[:, None]), base


def psi(gamma, m, theta):
    """``sum_{x != y} m_x Gamma_xy (exp(theta_y - theta_x) - 1)``."""
    q, base = _fluxes(gamma, np.asarray(m, dtype=float), np.asarray(theta, dtype=float))
    return float(np.sum(q - base))


def rate_from_gamma(gamma, m, mu, *, tol=1e-12, max_iter=100):
    """Primal and dual local costs of velocity ``mu`` at ``m`` under rates ``gamma``.

    The dual maximizes ``theta . mu - Psi(theta)`` with ``theta_{d-1} = 0``;
    the primal fluxes are ``q_xy = m_x Gamma_xy exp(theta_y - theta_x)`` and
    the primal cost sums ``m_x Gamma_xy lambda(q_xy / (m_x Gamma_xy))`` over
    ordered pairs ``x != y``.
    """
    m = simplex_point(m)
    mu = np.asarray(mu, dtype=float)
    d = len(m)
    if abs(mu.sum()) > 1e-10:
        inf = np.full((d, d), INF)
        return RateEval(inf, INF, INF, INF, np.full(d, np.nan), np.full((d, d), np.nan), INF)
    if np.any(m <= 0):
        raise InputError("m must lie in the open simplex", op="big_lambda")
    theta = np.zeros(d)

    def objective(th):
        return float(th @ mu) - psi(gamma, m, th)

    val = objective(theta)
    gnorm = INF
    for _ in range(max_iter):
        q, _ = _fluxes(gamma, m, theta)
        grad = mu - (q.sum(axis=0) - q.sum(axis=1))
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < tol:
            break
        w = q + q.T
        hess = np.diag(w.sum(axis=1)) - w  # Hessian of Psi, a weighted Laplacian
        step = np.zeros(d)
        step[:-1] = np.linalg.solve(hess[:-1, :-1], grad[:-1])
        s = 1.0
        while True:
            cand = theta + s * step
            new = objective(cand)
            if new >= val - 1e-15 * max(1.0, abs(val)) or s < 1e-12:
                break
            s *= 0.5
        theta, val = cand, new
    else:
        raise ConvergenceError("dual Newton iteration did not converge", op="big_lambda",
                               context={"grad_norm": gnorm})
    q, base = _fluxes(gamma, m, theta)
    off = ~np.eye(d, dtype=bool)
    lam = np.zeros((d, d))
    # pairs with zero reference rate carry zero flux and cost nothing
    ratio = np.divide(q, base, out=np.ones_like(q), where=base > 0)
    lam[off] = local_rate(ratio[off])
    primal = float(np.sum(base[off] * lam[off]))
    feas = float(np.max(np.abs(q.sum(axis=0) - q.sum(axis=1) - mu)))
    return RateEval(lam, psi(gamma, m, theta), primal, val, theta, q, feas)


def big_lambda(spec, field, t, m, mu, **kw):
    """Local large-deviation cost at ``(t, m)`` with rates from the master field."""
    U, _ = field.evaluate(t, m)
    return rate_from_gamma(spec.rate_matrix(U), m, mu, **kw)


def rate_functional(spec, field, gamma: MeasureFlow, m0):
    """Trapezoidal ``int Lambda(t, gamma, gamma')`` over the nodes of ``gamma``.

    ``field`` must offer ``evaluate_many(ts, ms, derivatives=False)``.
    Returns ``inf`` when ``gamma`` does not start at ``m0`` or leaves the simplex.
    """
    path = np.asarray(gamma.m, dtype=float)
    m0 = simplex_point(m0)
    if np.max(np.abs(path[0] - m0)) > 1e-12:
        return INF
    if np.any(path <= 0) or np.max(np.abs(path.sum(axis=1) - 1)) > 1e-10:
        return INF
    t = gamma.grid.nodes
    vel = np.gradient(path, t, axis=0, edge_order=2)
    U, _ = field.evaluate_many(t, path, derivatives=False)
    rates = spec.rate_matrix(U)
    vals = np.array([rate_from_gamma(rates[k], path[k], vel[k]).big_lambda
                     for k in range(len(t))])
    if not np.all(np.isfinite(vals)):
        return INF
    return float(np.trapezoid(vals, t))

"""Quick invariant suite behind the ``check`` experiment."""
from __future__ import annotations

import time

import numpy as np

from .errors import MFGError


def _legendre(spec, rng):
    K = spec.p_bound if not spec.separable else 2 * getattr(spec, "b_coef", 1.0) * (spec.M_bound - spec.kappa)
    from .model import legendre_consistency_check

    worst = 0.0
    for _ in range(100):
        p = rng.uniform(-K, K, spec.d)
        x = int(rng.integers(spec.d))
        p[x] = 0.0
        worst = max(worst, legendre_consistency_check(spec, x, p, grid_n=4001))
    return worst, worst <= 1e-6, 1e-6


def _hamiltonian_gradient(spec, rng):
    # alpha* = -grad_p H on unclamped coordinates
    worst = 0.0
    step = 1e-6
    for _ in range(50):
        x = int(rng.integers(spec.d))
        p = rng.uniform(-0.5, 0.5, spec.d)
        a = spec.alpha_star(x, p)
        for y in range(spec.d):
            if y == x or not spec.kappa + 1e-3 < a[y] < spec.M_bound - 1e-3:
                continue
            e = np.zeros(spec.d)
            e[y] = step
            g = (spec.hamiltonian(x, p + e) - spec.hamiltonian(x, p - e)) / (2 * step)
            worst = max(worst, abs(a[y] + g))
    return worst, worst <= 1e-5, 1e-5


def _mfg(spec, rng):
    from .mfg import mfg_residual, solve_mfg

    m0 = np.arange(1, spec.d + 1, dtype=float)
    sol = solve_mfg(spec, 0.0, m0 / m0.sum(), dt=1e-2 * spec.T)
    hjb, kfp = mfg_residual(spec, sol)
    val = max(hjb, kfp)
    # coarse grid: second-order residual scale (dt = 1e-2)
    return val, val <= 1e-3, 1e-3


def _counts_vs_full(spec, rng):
    from .nplayer import solve_counts_reduced, solve_full_tensor

    gap = 0.0
    for N in (2, 3):
        full = solve_full_tensor(spec, N, dt=1e-2)
        red = solve_counts_reduced(spec, N, dt=1e-2).to_full()
        gap = max(gap, float(np.max(np.abs(full.v - red))))
    return gap, gap <= 1e-9, 1e-9


def _ldp_duality(spec, rng):
    from .asymptotics import rate_from_gamma

    worst = 0.0
    for _ in range(20):
        m = rng.dirichlet(np.ones(spec.d))
        u = rng.normal(size=spec.d)
        mu = rng.normal(size=spec.d)
        mu -= mu.mean()
        r = rate_from_gamma(spec.rate_matrix(u), m, mu)
        worst = max(worst, r.duality_gap)
    return worst, worst <= 1e-6, 1e-6


def _sigma_structure(spec, rng):
    from .asymptotics import jump_covariance

    worst = 0.0
    for _ in range(20):
        m = rng.dirichlet(np.ones(spec.d))
        s = jump_covariance(spec.rate_matrix(rng.normal(size=spec.d)), m)
        worst = max(worst, float(np.max(np.abs(s - s.T))), float(np.max(np.abs(s.sum(axis=1)))),
                    float(-min(0.0, np.linalg.eigvalsh(s).min())))
    return worst, worst <= 1e-12, 1e-12


CHECKS = {
    "legendre_consistency": _legendre,
    "hamiltonian_gradient": _hamiltonian_gradient,
    "mfg_residual_coarse": _mfg,
    "counts_vs_full_tensor": _counts_vs_full,
    "ldp_duality_gap": _ldp_duality,
    "jump_covariance_structure": _sigma_structure,
}


def run_checks(spec, seed=0):
    """Run every check; returns ``{passed, checks: [{name, value, tol, passed, ...}]}``."""
    rng = np.random.default_rng(seed)
    rows = []
    for name, fn in CHECKS.items():
        start = time.perf_counter()
        try:
            val, ok, tol = fn(spec, rng)
            row = {"name": name, "value": float(val), "tol": tol, "passed": bool(ok)}
        except MFGError as err:
            row = {"name": name, "passed": False, "error": err.to_dict()}
        row["seconds"] = round(time.perf_counter() - start, 3)
        rows.append(row)
    return {"passed": all(r["passed"] for r in rows), "checks": rows}

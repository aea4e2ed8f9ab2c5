"""Independent reference values, frozen into ``frozen.json``.

Nothing here imports ``mfgfinite``.  The MFG system is solved as a two-point
boundary value problem with ``scipy.integrate.solve_bvp``; the N-player
system by per-joint-state loops and ``solve_ivp`` (DOP853); the LDP cost by
direct constrained minimisation over fluxes with SLSQP.

Run ``python3 tests/oracles/generate.py`` to regenerate.
"""
import itertools
import json
from pathlib import Path

import numpy as np
from scipy.integrate import solve_bvp, solve_ivp
from scipy.optimize import minimize

KAPPA, M, B, T = 0.5, 1.5, 1.0, 1.0
A = 0.5 * (KAPPA + M)


def alpha(p):
    return np.clip(A - p / (2 * B), KAPPA, M)


def ham(p):
    al = alpha(p)
    return -al * p - B * (al - A) ** 2


# --- MFG, d = 2, F = G = own mass, as a BVP in (u0, u1, m0) ---------------

def mfg_bvp(t0, m0_first):
    def rhs(t, y):
        u0, u1, q = y
        return np.vstack([ham(u1 - u0) - q,
                          ham(u0 - u1) - (1 - q),
                          -q * alpha(u1 - u0) + (1 - q) * alpha(u0 - u1)])

    def bc(ya, yb):
        return np.array([ya[2] - m0_first, yb[0] - yb[2], yb[1] - (1 - yb[2])])

    t = np.linspace(t0, T, 201)
    y = np.vstack([np.ones_like(t) * 0.5, np.ones_like(t) * 0.5, np.full_like(t, m0_first)])
    sol = solve_bvp(rhs, bc, t, y, tol=1e-11, max_nodes=200000)
    assert sol.success, sol.message
    return sol


def master_U(t, m_first):
    return mfg_bvp(t, m_first).sol(t)[:2]


# --- N-player Nash system by explicit loops ---------------------------------

def nplayer_oracle(N, d, F, G):
    joint = list(itertools.product(range(d), repeat=N))
    index = {x: k for k, x in enumerate(joint)}

    def others(x, i):
        c = np.zeros(d)
        for j, xj in enumerate(x):
            if j != i:
                c[xj] += 1
        return c / (N - 1)

    def moved(x, j, z):
        y = list(x)
        y[j] = z
        return index[tuple(y)]

    def rhs(t, flat):
        v = flat.reshape(N, len(joint))
        out = np.zeros_like(v)
        for k, x in enumerate(joint):
            rates = {}
            for j in range(N):
                rates[j] = {z: float(alpha(v[j, moved(x, j, z)] - v[j, k]))
                            for z in range(d) if z != x[j]}
            for i in range(N):
                h = sum(float(ham(v[i, moved(x, i, z)] - v[i, k])) for z in range(d) if z != x[i])
                drift = sum(r * (v[i, moved(x, j, z)] - v[i, k])
                            for j in range(N) if j != i for z, r in rates[j].items())
                out[i, k] = h - drift - F(x[i], others(x, i))
        return out.ravel()

    vT = np.array([[G(x[i], others(x, i)) for x in joint] for i in range(N)])
    sol = solve_ivp(rhs, (T, 0.0), vT.ravel(), method="DOP853", rtol=1e-12, atol=1e-13)
    return joint, sol.y[:, -1].reshape(N, len(joint))


# --- LDP primal: minimise over fluxes q on ordered pairs --------------------

def lam(r):
    return np.where(r > 0, r * np.log(np.maximum(r, 1e-300)) - r + 1, 1.0)


def ldp_primal(gamma, m, mu):
    d = len(m)
    pairs = [(x, y) for x in range(d) for y in range(d) if x != y]
    ref = np.array([m[x] * gamma[x, y] for x, y in pairs])
    E = np.zeros((d, len(pairs)))
    for k, (x, y) in enumerate(pairs):
        E[y, k] += 1
        E[x, k] -= 1
    # rows of E sum to zero; drop one to keep the constraint full rank
    E, mu = E[:-1], np.asarray(mu)[:-1]

    def obj(q):
        return float(np.sum(ref * lam(q / ref)))

    def grad(q):
        return np.log(np.maximum(q, 1e-300) / ref)

    res = minimize(obj, ref.copy(), jac=grad, method="SLSQP",
                   bounds=[(1e-14, None)] * len(pairs),
                   constraints=[{"type": "eq", "fun": lambda q: E @ q - mu, "jac": lambda q: E}],
                   options={"ftol": 1e-15, "maxiter": 1000})
    assert res.success, res.message
    return res.fun


def main():
    out = {}
    sol = mfg_bvp(0.0, 0.7)
    out["mfg_m07"] = {"u0": sol.sol(0.0)[:2].tolist(), "mT_first": float(sol.sol(T)[2]),
                      "m_half_first": float(sol.sol(0.5)[2])}
    pts = [(0.0, 0.3), (0.5, 0.3), (0.5, 0.8), (0.9, 0.55)]
    eps = 1e-4
    master = []
    for t, q in pts:
        U = master_U(t, q)
        Dp = (master_U(t, q + eps) - master_U(t, q - eps)) / (2 * eps)
        # derivative along delta_1 - delta_2 (mass moved into the first state)
        master.append({"t": t, "m_first": q, "U": U.tolist(), "dU_dir": Dp.tolist()})
    out["master"] = master

    own = lambda x, m: m[x]  # noqa: E731
    joint, v = nplayer_oracle(2, 2, own, own)
    out["nplayer_N2_d2"] = {"joint": [list(x) for x in joint], "v0": v.tolist()}
    joint, v = nplayer_oracle(3, 3, own, own)
    out["nplayer_N3_d3"] = {"joint": [list(x) for x in joint], "v0": v.tolist()}

    rng = np.random.default_rng(20240611)
    cases = []
    for d in (2, 3, 3):
        gamma = rng.uniform(KAPPA, M, (d, d))
        np.fill_diagonal(gamma, 0.0)
        np.fill_diagonal(gamma, -gamma.sum(axis=1))
        m = rng.dirichlet(np.ones(d) * 3)
        mu = rng.normal(size=d) * 0.3
        mu -= mu.mean()
        cases.append({"gamma": gamma.tolist(), "m": m.tolist(), "mu": mu.tolist(),
                      "Lambda": ldp_primal(gamma, m, mu)})
    out["ldp_primal"] = cases

    path = Path(__file__).with_name("frozen.json")
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(json.dumps(out, indent=1)[:2000])


if __name__ == "__main__":
    main()

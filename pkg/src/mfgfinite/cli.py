"""Command line entry point: named experiments writing CSV/JSON plus a manifest.

Every run writes its data files, a plotting script for them and a manifest
with the configuration echo, library version, wall-clock time and SHA-256
checksums of the data files.  ``--figures`` additionally renders PNG images
with matplotlib (not checksummed).  Failures print a JSON error
``{module, op, message, context}`` on stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputError, MFGError
from .model import QuadraticModel, load_model
from .report import (fit_loglog_slope, render_figures, sha256, write_csv, write_json,
                     write_plot_script)

EXPERIMENTS = ("solve-mfg", "solve-master", "solve-nplayer", "simulate", "convergence",
               "clt", "ldp", "check")
STOCHASTIC = {"simulate", "clt"}


@dataclass
class ExperimentConfig:
    name: str
    out: str
    model: str | None = None
    params: dict = field(default_factory=dict)
    seed: int | None = None
    figures: bool = False

    def validate(self):
        if self.name not in EXPERIMENTS:
            raise InputError(f"unknown experiment {self.name!r}", op="run_experiment",
                             context={"experiment": self.name})
        if self.name in STOCHASTIC and self.seed is None:
            raise InputError("a seed is required for stochastic experiments",
                             op="run_experiment", context={"experiment": self.name})


@dataclass
class RunManifest:
    config: dict
    version: str
    wall_clock_s: float
    checksums: dict

    def to_dict(self):
        return {"config": self.config, "version": self.version,
                "wall_clock_s": self.wall_clock_s, "checksums": self.checksums}


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _model(cfg):
    return QuadraticModel() if cfg.model is None else load_model(cfg.model)


def _m0(spec, text):
    if text is None:
        return np.full(spec.d, 1.0 / spec.d)
    return np.array(_floats(text))


# ---------------------------------------------------------------------------
# experiments; each returns (data files, plot specs, extra manifest info)

def _exp_solve_mfg(cfg, spec, out):
    from .mfg import mfg_residual, solve_mfg

    p = cfg.params
    sol = solve_mfg(spec, p.get("t0", 0.0), _m0(spec, p.get("m0")), damping=p.get("damping", 0.5),
                    tol=p.get("tol", 1e-11), dt=p.get("dt"))
    d = spec.d
    header = ["t"] + [f"u_{i + 1}" for i in range(d)] + [f"m_{i + 1}" for i in range(d)]
    rows = [[t, *u, *m] for t, u, m in zip(sol.grid.nodes, sol.u.u, sol.m.m)]
    write_csv(out, header, rows)
    hjb, kfp = mfg_residual(spec, sol)
    plots = [{"data": out.name, "x": "t", "y": header[1:], "image": out.stem + ".png",
              "title": "MFG value and measure"}]
    return [out], plots, {"iterations": sol.iterations, "hjb_residual": hjb,
                          "kfp_residual": kfp, "uniqueness_guaranteed": sol.uniqueness_guaranteed}


def _exp_solve_master(cfg, spec, out):
    from .master import SimplexGrid, build_master_field, master_residual, regularity_probe
    from .mfg import TimeGrid

    p = cfg.params
    grid = SimplexGrid(spec.d, int(p.get("n", 20)))
    times = TimeGrid(0.0, spec.T, int(p.get("times", 4)))
    fld = build_master_field(spec, grid, times, dt=p.get("dt"))
    d = spec.d
    mcols = [f"m_{i + 1}" for i in range(d)]
    rows_u, rows_d = [], []
    for j, t in enumerate(times.nodes):
        for k, node in enumerate(grid.nodes):
            for x in range(d):
                rows_u.append([t, x + 1, *node, fld.U[j, k, x]])
                if np.isfinite(fld.D1[j, k, x]).all():
                    for y in range(d):
                        rows_d.append([t, x + 1, *node, y + 1, *(fld.DmU[j, k, x, y])])
    out.mkdir(parents=True, exist_ok=True)
    fu = write_csv(out / "U.csv", ["t", "x", *mcols, "U"], rows_u)
    fd = write_csv(out / "DmU.csv", ["t", "x", *mcols, "y"] + [f"DmU_{z + 1}" for z in range(d)],
                   rows_d)
    lip_u, lip_d = regularity_probe(fld)
    res = master_residual(spec, fld)
    summary = write_json(out / "summary.json", {"residual": res, "lip_U": lip_u, "lip_DmU": lip_d,
                                                 "picard_iterations": fld.iterations,
                                                 "n": grid.n, "solver_dt": fld.solver_dt})
    # terminal-time slice along the first coordinate for plotting
    prof = [[node[0], *fld.U[0, k]] for k, node in enumerate(grid.nodes)]
    fp = write_csv(out / "U_t0_profile.csv", ["m_1"] + [f"U_{x + 1}" for x in range(d)], prof)
    plots = [{"data": fp.name, "x": "m_1", "y": [f"U_{x + 1}" for x in range(d)],
              "image": "U_t0_profile.png", "title": "U(t0, x, m)", "marker": "o"}]
    return [fu, fd, summary, fp], plots, {"residual": res}


def _exp_solve_nplayer(cfg, spec, out):
    from .nplayer import solve_counts_reduced, solve_full_tensor

    p = cfg.params
    N = int(p.get("N", 4))
    every = int(p.get("every", 10))
    d = spec.d
    if p.get("full"):
        val = solve_full_tensor(spec, N, dt=p.get("dt"))
        from .nplayer import joint_digits
        digits = joint_digits(N, d)
        header = ["t", "i"] + [f"x_{i + 1}" for i in range(N)] + ["v"]
        rows = [[t, i + 1, *(digits[a] + 1), val.v[k, i, a]]
                for k, t in enumerate(val.times.nodes) if k % every == 0 or k == val.times.n_steps
                for i in range(N) for a in range(d**N)]
    else:
        val = solve_counts_reduced(spec, N, dt=p.get("dt"))
        header = ["t", "x"] + [f"n_{i + 1}" for i in range(d)] + ["w"]
        rows = [[t, x + 1, *val.lattice.counts[kk], val.w[k, x, kk]]
                for k, t in enumerate(val.times.nodes) if k % every == 0 or k == val.times.n_steps
                for x in range(d) for kk in range(val.lattice.size)]
    write_csv(out, header, rows)
    return [out], [], {"N": N}


def _exp_simulate(cfg, spec, out):
    from .mfg import TimeGrid, solve_mfg
    from .nplayer import lattice_master_field, solve_counts_reduced
    from .sim import chaos_estimates, run_coupled_batch

    p = cfg.params
    Ns = _ints(p["Ns"]) if p.get("Ns") else [int(p.get("N", 8))]
    paths = int(p.get("paths", 1000))
    m0 = _m0(spec, p.get("m0"))
    mfg = solve_mfg(spec, 0.0, m0, dt=p.get("dt"))
    results, rows = {}, []
    for N in Ns:
        nash = solve_counts_reduced(spec, N, dt=p.get("dt"))
        fld = lattice_master_field(spec, N, TimeGrid(0.0, spec.T, int(p.get("times", 20))),
                                   dt=p.get("dt"), with_derivatives=False)
        batch = run_coupled_batch(spec, fld, nash, N, paths, cfg.seed, mfg=mfg, m0=m0,
                                  initial=p.get("initial", "iid"))
        est = chaos_estimates(batch)
        results[str(N)] = {"estimates": {k: v[0] for k, v in est.items()},
                           "std_errors": {k: v[1] for k, v in est.items()}}
        keys = ("e_yx", "e_emp_yx", "e_chaos", "e_lln")
        rows.append([N] + [x for k in keys for x in est[k]])
    out.mkdir(parents=True, exist_ok=True)
    header = ["N", "e_yx", "se_yx", "e_emp_yx", "se_emp_yx", "e_chaos", "se_chaos", "e_lln", "se_lln"]
    fc = write_csv(out / "simulate.csv", header, rows)
    fj = write_json(out / "simulate.json", {"paths": paths, "seed": cfg.seed, "results": results})
    plots = [{"data": fc.name, "x": "N", "y": ["e_yx", "e_chaos", "e_lln"], "image": "simulate.png",
              "title": "coupling and chaos estimates", "marker": "o"}]
    return [fc, fj], plots, {}


def _exp_convergence(cfg, spec, out):
    from .mfg import TimeGrid
    from .nplayer import lattice_master_field, projection_residual, theorem1_gap

    p = cfg.params
    Ns = _ints(p.get("Ns", "4,8,16,32"))
    m0 = _m0(spec, p.get("m0"))
    rows = []
    for N in Ns:
        avg, l1 = theorem1_gap(spec, N, float(p.get("t0", 0.0)), m0, dt=p.get("dt"))
        fld = lattice_master_field(spec, N, TimeGrid(0.0, spec.T, int(p.get("times", 4))),
                                   dt=p.get("dt"))
        r, tau = projection_residual(spec, fld, N)
        rows.append([N, avg, l1, r, tau])
    out.mkdir(parents=True, exist_ok=True)
    header = ["N", "avg_gap", "l1_gap", "r_sup", "tau_sup"]
    fc = write_csv(out / "convergence.csv", header, rows)
    arr = np.array(rows, dtype=float)
    slopes = {}
    if len(Ns) >= 3:
        for c, name in enumerate(header[1:], start=1):
            if np.all(arr[:, c] > 0):
                s, r2 = fit_loglog_slope(arr[:, 0], arr[:, c])
                slopes[name] = {"slope": s, "r2": r2}
    fj = write_json(out / "slopes.json", slopes)
    plots = [{"data": fc.name, "x": "N", "y": header[1:], "image": "convergence.png",
              "title": "N-player gaps", "loglog": True, "marker": "o"}]
    return [fc, fj], plots, {"slopes": slopes}


def _exp_clt(cfg, spec, out):
    from .asymptotics import evolve_fluctuation_law, iid_initial_covariance
    from .mfg import solve_mfg
    from .nplayer import solve_counts_reduced
    from .sim import NashPolicy, run_systems

    p = cfg.params
    N = int(p.get("N", 200))
    paths = int(p.get("paths", 10000))
    t_end = float(p.get("t", spec.T))
    m0 = _m0(spec, p.get("m0", "0.7,0.3" if spec.d == 2 else None))
    initial = p.get("initial", "deterministic")
    cov0 = np.zeros((spec.d, spec.d)) if initial == "deterministic" else iid_initial_covariance(m0)
    mfg = solve_mfg(spec, 0.0, m0, dt=p.get("dt"))
    law = evolve_fluctuation_law(spec, m0, cov0, mfg=mfg)
    k = int(np.argmin(np.abs(law.times - t_end)))
    nash = solve_counts_reduced(spec, N, dt=p.get("dt"))
    batch = run_systems(spec, {"Y": NashPolicy(spec, nash)}, N, paths, cfg.seed, m0,
                        T=float(law.times[k]), initial=initial)
    m_t = mfg.m.at(law.times[k])
    rho = np.sqrt(N) * (batch.terminal_counts["Y"] / N - m_t)
    mc = np.cov(rho.T)
    ode = law.cov[k]
    gap = float(np.linalg.norm(mc - ode) / np.linalg.norm(ode))
    out.mkdir(parents=True, exist_ok=True)
    fj = write_json(out / "clt.json", {"N": N, "paths": paths, "t": law.times[k], "ode_cov": ode,
                                       "mc_cov": mc, "frobenius_rel_gap": gap,
                                       "mc_mean": rho.mean(axis=0)})
    d = spec.d
    cols = [f"cov_{i + 1}{j + 1}" for i in range(d) for j in range(i, d)]
    rows = [[t, *[c[i, j] for i in range(d) for j in range(i, d)]] for t, c in zip(law.times, law.cov)]
    fc = write_csv(out / "clt_cov.csv", ["t", *cols], rows)
    plots = [{"data": fc.name, "x": "t", "y": cols, "image": "clt_cov.png",
              "title": "fluctuation covariance"}]
    return [fj, fc], plots, {"frobenius_rel_gap": gap}


def _exp_ldp(cfg, spec, out):
    from .asymptotics import rate_from_gamma, rate_functional
    from .master import MasterEvaluator
    from .mfg import MeasureFlow, TimeGrid

    p = cfg.params
    out.mkdir(parents=True, exist_ok=True)
    if p.get("probe"):
        rng = np.random.default_rng(cfg.seed if cfg.seed is not None else 0)
        trials = int(p.get("trials", 100))
        ev = MasterEvaluator(spec, dt=p.get("dt", 1e-2))
        ms = rng.dirichlet(np.ones(spec.d), trials)
        ts = rng.uniform(0.0, spec.T, trials)
        U, _ = ev.evaluate_many(ts, ms, derivatives=False)
        rows = []
        for k in range(trials):
            mu = rng.normal(size=spec.d)
            mu -= mu.mean()
            r = rate_from_gamma(spec.rate_matrix(U[k]), ms[k], mu)
            rows.append([ts[k], r.big_lambda, r.big_lambda_dual, r.duality_gap, r.feasibility])
        arr = np.array(rows)
        fc = write_csv(out / "ldp_probe.csv", ["t", "Lambda", "Lambda_dual", "gap", "feasibility"],
                       rows)
        fj = write_json(out / "ldp_probe.json", {"trials": trials,
                                                 "max_duality_gap": arr[:, 3].max(),
                                                 "max_feasibility": arr[:, 4].max()})
        return [fc, fj], [], {}
    if not p.get("gamma"):
        raise InputError("--gamma <csv> or --probe is required", op="ldp")
    data = np.genfromtxt(p["gamma"], delimiter=",", names=True)
    t = np.asarray(data["t"], dtype=float)
    path = np.stack([data[f"m_{i + 1}"] for i in range(spec.d)], axis=1)
    dt_path = np.diff(t)
    if len(t) < 3 or not np.allclose(dt_path, dt_path[0]):
        raise InputError("gamma must be sampled on a uniform grid with >= 3 nodes", op="ldp")
    grid = TimeGrid(float(t[0]), float(t[-1]), len(t) - 1)
    ev = MasterEvaluator(spec, dt=p.get("dt", grid.dt))
    m0 = _m0(spec, p.get("m0")) if p.get("m0") else path[0]
    val = rate_functional(spec, ev, MeasureFlow(grid, path), m0)
    vel = np.gradient(path, t, axis=0, edge_order=2)
    U, _ = ev.evaluate_many(t, path, derivatives=False)
    lam = [rate_from_gamma(spec.rate_matrix(U[k]), path[k], vel[k]).big_lambda
           for k in range(len(t))]
    fc = write_csv(out / "ldp.csv", ["t", "Lambda"], list(zip(t, lam)))
    fj = write_json(out / "ldp.json", {"I": val, "per_node": lam})
    plots = [{"data": fc.name, "x": "t", "y": ["Lambda"], "image": "ldp.png",
              "title": "local rate along the path"}]
    return [fc, fj], plots, {"I": val}


def _exp_check(cfg, spec, out):
    from .checks import run_checks

    result = run_checks(spec)
    f = write_json(out / "check.json" if out.suffix != ".json" else out, result)
    return [f], [], {"passed": result["passed"]}


_DISPATCH = {
    "solve-mfg": _exp_solve_mfg, "solve-master": _exp_solve_master,
    "solve-nplayer": _exp_solve_nplayer, "simulate": _exp_simulate,
    "convergence": _exp_convergence, "clt": _exp_clt, "ldp": _exp_ldp, "check": _exp_check,
}


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    cfg.validate()
    start = time.perf_counter()
    spec = _model(cfg)
    out = Path(cfg.out)
    files, plots, info = _DISPATCH[cfg.name](cfg, spec, out)
    base = out if out.suffix == "" else out.parent
    stem = "" if out.suffix == "" else out.stem + "_"
    if plots:
        script = write_plot_script(base, plots, name=f"{stem}plot.py")
        files.append(script)
        if cfg.figures:
            render_figures(script)
    manifest = RunManifest(
        config={"experiment": cfg.name, "model": cfg.model, "params": cfg.params,
                "seed": cfg.seed, "model_config": spec.config()},
        version=__version__, wall_clock_s=time.perf_counter() - start,
        checksums={Path(f).name: sha256(f) for f in files})
    doc = manifest.to_dict()
    doc["summary"] = info
    write_json(base / f"{stem}manifest.json", doc)
    return manifest


def build_parser():
    ap = argparse.ArgumentParser(prog="mfgfinite", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="experiment", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--model", help="model JSON file (default: built-in quadratic game)")
        sp.add_argument("--out", required=True, help="output file or directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--figures", action="store_true", help="also render PNG figures")
        return sp

    sp = add("solve-mfg", "solve the MFG system from (t0, m0)")
    sp.add_argument("--t0", type=float, default=0.0)
    sp.add_argument("--m0")
    sp.add_argument("--tol", type=float, default=1e-11)
    sp.add_argument("--damping", type=float, default=0.5)

    sp = add("solve-master", "tabulate the master field on a simplex grid")
    sp.add_argument("--n", type=int, default=20)
    sp.add_argument("--times", type=int, default=4, help="number of tabulation intervals")

    sp = add("solve-nplayer", "solve the N-player Nash system")
    sp.add_argument("--N", type=int, required=True)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--reduced", action="store_true", default=True)
    g.add_argument("--full", action="store_true")
    sp.add_argument("--every", type=int, default=10, help="write every k-th time node")

    sp = add("simulate", "coupled Monte Carlo of the optimal, projected and limit systems")
    sp.add_argument("--N", type=int, default=8)
    sp.add_argument("--Ns")
    sp.add_argument("--paths", type=int, default=1000)
    sp.add_argument("--m0")
    sp.add_argument("--initial", choices=("iid", "deterministic"), default="iid")
    sp.add_argument("--times", type=int, default=20)

    sp = add("convergence", "N-player vs master-field gaps over a sweep of N")
    sp.add_argument("--Ns", default="4,8,16,32")
    sp.add_argument("--m0")
    sp.add_argument("--t0", type=float, default=0.0)
    sp.add_argument("--times", type=int, default=4)

    sp = add("clt", "fluctuation covariance: ODE prediction vs Monte Carlo")
    sp.add_argument("--N", type=int, default=200)
    sp.add_argument("--paths", type=int, default=10000)
    sp.add_argument("--t", type=float)
    sp.add_argument("--m0")
    sp.add_argument("--initial", choices=("iid", "deterministic"), default="deterministic")

    sp = add("ldp", "rate functional of a measure path, or random duality probes")
    sp.add_argument("--gamma", help="CSV with columns t, m_1..m_d")
    sp.add_argument("--m0")
    sp.add_argument("--probe", action="store_true")
    sp.add_argument("--trials", type=int, default=100)

    add("check", "run the invariant suite")
    return ap


_COMMON = {"experiment", "model", "out", "seed", "figures"}


def config_from_args(ns) -> ExperimentConfig:
    params = {k: v for k, v in vars(ns).items() if k not in _COMMON and v is not None}
    if params.get("full"):
        params.pop("reduced", None)
    return ExperimentConfig(ns.experiment, ns.out, ns.model, params, ns.seed, ns.figures)


def main(argv=None):
    ns = build_parser().parse_args(argv)
    try:
        manifest = run_experiment(config_from_args(ns))
    except MFGError as err:
        sys.stderr.write(json.dumps(err.to_dict(), sort_keys=True, default=str) + "\n")
        return 2
    sys.stdout.write(json.dumps({"checksums": manifest.checksums}, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())

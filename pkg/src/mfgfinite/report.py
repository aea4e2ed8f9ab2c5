"""Output files: atomic CSV/JSON writers, checksums, plot scripts and figures."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import InputError


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return atomic_write(path, "\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if f != f:
            return "nan"
        if f in (float("inf"), float("-inf")):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


def dumps(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    return atomic_write(path, dumps(obj))


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


PLOT_SCRIPT = '''"""Plot the data files listed in PLOTS (written next to this script)."""
import csv
import sys
from pathlib import Path

PLOTS = {plots}


def load(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {{k: [float(r[k]) for r in rows] for k in rows[0]}} if rows else {{}}


def main(out_dir=None):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    here = Path(__file__).parent
    out_dir = Path(out_dir) if out_dir else here
    for item in PLOTS:
        data = load(here / item["data"])
        fig, ax = plt.subplots(figsize=(6, 4))
        for col in item["y"]:
            ax.plot(data[item["x"]], data[col], marker=item.get("marker", ""), label=col)
        if item.get("loglog"):
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel(item["x"])
        ax.set_title(item.get("title", ""))
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / item["image"], dpi=120)
        plt.close(fig)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
'''


def write_plot_script(out_dir, plots, name="plot.py"):
    """Write a plotting script for ``plots`` (dicts with data, x, y, image, ...)."""
    text = PLOT_SCRIPT.format(plots=json.dumps(plots, indent=4, sort_keys=True))
    return atomic_write(Path(out_dir) / name, text)


def render_figures(script):
    """Run an emitted plot script in-process; returns the image paths."""
    import importlib.util

    script = Path(script)
    spec = importlib.util.spec_from_file_location("_mfg_plot", script)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    mod.main(script.parent)
    return [script.parent / p["image"] for p in mod.PLOTS]


def fit_loglog_slope(xs, ys):
    """Least-squares slope of ``log y`` against ``log x`` and its ``R^2``."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if len(x) != len(y) or len(x) < 3:
        raise InputError("need at least three (x, y) pairs", op="fit_loglog_slope")
    if np.any(x <= 0) or np.any(y <= 0):
        raise InputError("log-log fit needs positive values", op="fit_loglog_slope",
                         context={"xs": x.tolist(), "ys": y.tolist()})
    lx, ly = np.log(x), np.log(y)
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return float(slope), float(r2)

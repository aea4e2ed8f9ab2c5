import csv
import json

import numpy as np
import pytest

from mfgfinite import QuadraticModel
from mfgfinite.cli import ExperimentConfig, main, run_experiment
from mfgfinite.errors import InputError
from mfgfinite.report import fit_loglog_slope, sha256


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_check_passes(tmp_path):
    assert main(["check", "--out", str(tmp_path)]) == 0
    result = json.loads((tmp_path / "check.json").read_text())
    assert result["passed"] is True
    assert all(c["passed"] for c in result["checks"])


def test_convergence_outputs(tmp_path):
    out = tmp_path / "conv"
    assert main(["convergence", "--Ns", "4,8,16", "--dt", "2e-3", "--out", str(out)]) == 0
    rows = read_csv(out / "convergence.csv")
    assert [int(r["N"]) for r in rows] == [4, 8, 16]
    slopes = json.loads((out / "slopes.json").read_text())
    assert set(slopes) == {"avg_gap", "l1_gap", "r_sup", "tau_sup"}
    assert all(s["slope"] < 0 for s in slopes.values())
    manifest = json.loads((out / "manifest.json").read_text())
    for name, digest in manifest["checksums"].items():
        assert sha256(out / name) == digest
    assert (out / "plot.py").exists()


def test_solve_mfg_csv(tmp_path):
    out = tmp_path / "mfg.csv"
    assert main(["solve-mfg", "--m0", "0.7,0.3", "--dt", "1e-2", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["t", "u_1", "u_2", "m_1", "m_2"]
    assert float(rows[0]["m_1"]) == 0.7
    assert (tmp_path / "mfg_manifest.json").exists()


def test_bad_model_names_field(tmp_path, capsys):
    bad = tmp_path / "model.json"
    cfg = QuadraticModel().config()
    cfg["kappa"] = -1.0
    bad.write_text(json.dumps(cfg))
    code = main(["check", "--model", str(bad), "--out", str(tmp_path / "o")])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["context"]["field"] == "kappa"
    assert {"module", "op", "message", "context"} <= set(err)


def test_config_validation(tmp_path):
    with pytest.raises(InputError):
        run_experiment(ExperimentConfig("nonsense", str(tmp_path)))
    with pytest.raises(InputError):
        run_experiment(ExperimentConfig("simulate", str(tmp_path)))


def test_missing_seed_exit_code(tmp_path, capsys):
    assert main(["clt", "--out", str(tmp_path)]) == 2
    assert "seed" in json.loads(capsys.readouterr().err)["message"]


def test_figures_flag_renders_png(tmp_path):
    out = tmp_path / "mfg.csv"
    assert main(["solve-mfg", "--dt", "1e-2", "--out", str(out), "--figures"]) == 0
    assert list(tmp_path.glob("*.png"))
    plain = tmp_path / "plain"
    plain.mkdir()
    assert main(["solve-mfg", "--dt", "1e-2", "--out", str(plain / "mfg.csv")]) == 0
    assert not list(plain.glob("*.png"))


def test_loglog_slope_trivial():
    N = np.array([4.0, 8.0, 16.0, 32.0])
    s, r2 = fit_loglog_slope(N, 3.0 / N)
    assert s == pytest.approx(-1.0, abs=1e-12) and r2 == pytest.approx(1.0)
    assert fit_loglog_slope(N, N**-0.5)[0] == pytest.approx(-0.5, abs=1e-12)
    assert fit_loglog_slope(N, np.full(4, 2.0)) == pytest.approx((0.0, 1.0), abs=1e-12)
    with pytest.raises(InputError):
        fit_loglog_slope(N, [1.0, 0.0, 1.0, 1.0])
    with pytest.raises(InputError):
        fit_loglog_slope([1.0, 2.0], [1.0, 2.0])

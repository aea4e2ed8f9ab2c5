import json

import numpy as np
import pytest

from mfgfinite import ModelConfigError, QuadraticModel, load_model, model_from_dict
from mfgfinite.errors import InputError
from mfgfinite.model import (CallableCost, alpha_star_eval, delta, legendre_consistency_check,
                             monotonicity_probe, simplex_point, tangent_vector)

KAPPA, M, B = 0.5, 1.5, 1.0
A = 1.0


def grid_argmax(p_y, n=200001):
    """Brute-force maximiser of -alpha p - b (alpha - a)^2 over [kappa, M]."""
    al = np.linspace(KAPPA, M, n)
    vals = -al * p_y - B * (al - A) ** 2
    k = np.argmax(vals)
    return al[k], vals[k]


def test_zero_momentum(own):
    p = np.zeros(2)
    assert own.hamiltonian(0, p) == 0.0
    assert legendre_consistency_check(own, 0, p, grid_n=2001) <= 1e-9
    np.testing.assert_array_equal(alpha_star_eval(own, 0, p), [A, A])


def test_interior_band_formula(own):
    p = np.array([0.0, 0.6])
    expected = 0.6**2 / (4 * B) - A * 0.6
    assert own.hamiltonian(0, p) == pytest.approx(expected, abs=1e-15)
    p = np.array([-0.9, 0.0])
    assert own.hamiltonian(1, p) == pytest.approx(0.81 / 4 + 0.9, abs=1e-15)


def test_linear_branch_against_grid_max(own):
    p_y = 2 * B * (M - KAPPA)
    _, gmax = grid_argmax(p_y)
    linear = -KAPPA * p_y - B * (M - KAPPA) ** 2 / 4
    assert gmax == pytest.approx(linear, abs=1e-9)
    assert own.hamiltonian(0, np.array([0.0, p_y])) == pytest.approx(linear, abs=1e-12)
    assert legendre_consistency_check(own, 0, np.array([0.0, p_y]), grid_n=2001) <= 1e-9


@pytest.mark.parametrize("p_y, expected", [(1.0, KAPPA), (-2 * B * (M - KAPPA), M)])
def test_alpha_clamps_match_grid_argmax(own, p_y, expected):
    arg, _ = grid_argmax(p_y)
    assert arg == pytest.approx(expected, abs=1e-5)
    assert alpha_star_eval(own, 0, np.array([0.0, p_y]))[1] == pytest.approx(expected, abs=0)


def test_monotonicity_probe():
    assert monotonicity_probe(QuadraticModel(), 200, 1) >= 0.0
    assert monotonicity_probe(QuadraticModel(F="zero", G="zero"), 50, 1) == 0.0
    neg = CallableCost(lambda m: -m)
    bad = QuadraticModel(F=neg, G=neg)
    m, m2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    from mfgfinite.model import monotonicity_gap
    assert monotonicity_gap(bad.F, m, m2) == pytest.approx(-2.0)
    assert monotonicity_probe(bad, 50, 1) < 0.0


def test_delta_and_rate_matrix(own3, rng):
    u = rng.normal(size=(4, 3))
    dl = delta(u)
    assert dl.shape == (4, 3, 3)
    np.testing.assert_allclose(dl[1, 0, 2], u[1, 2] - u[1, 0])
    g = own3.rate_matrix(u)
    np.testing.assert_allclose(g.sum(axis=-1), 0.0, atol=1e-14)
    off = g[:, ~np.eye(3, dtype=bool)]
    assert off.min() >= KAPPA and off.max() <= M


def test_rate_matrix_jacobian_by_differences(own3, rng):
    u = rng.normal(size=3) * 0.3
    jac = own3.rate_matrix_jacobian(u)
    eps = 1e-6
    for w in range(3):
        e = np.zeros(3)
        e[w] = eps
        fd = (own3.rate_matrix(u + e) - own3.rate_matrix(u - e)) / (2 * eps)
        np.testing.assert_allclose(jac[..., w], fd, atol=1e-8)


def test_simplex_validation():
    with pytest.raises(InputError):
        simplex_point([0.5, 0.6])
    with pytest.raises(InputError):
        simplex_point([1.2, -0.2])
    with pytest.raises(InputError):
        tangent_vector([1.0, 0.5])


def test_model_config_roundtrip(tmp_path):
    cfg = {"d": 3, "T": 2.0, "kappa": 0.2, "M": 2.0, "model": "quadratic", "b": 0.5,
           "F": "own_mass", "G": [0.0, 1.0, 2.0]}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(cfg))
    spec = load_model(path)
    assert spec.d == 3 and spec.T == 2.0 and spec.b_coef == 0.5
    assert spec.config()["G"] == [0.0, 1.0, 2.0]
    assert model_from_dict(spec.config()).config() == spec.config()


@pytest.mark.parametrize("patch, field", [
    ({"Q": 1}, "Q"), ({"kappa": -1.0}, "kappa"), ({"M": 0.4}, "M"), ({"d": 2.5}, "d"), ({"b": -1}, "b"),
    ({"F": "nope"}, "F"), ({"T": "x"}, "T"), ({"model": "cubic"}, "model")])
def test_bad_config_names_field(patch, field):
    cfg = {"d": 2, "T": 1, "kappa": 0.5, "M": 1.5, "model": "quadratic", "b": 1}
    cfg.update(patch)
    with pytest.raises(ModelConfigError) as exc:
        model_from_dict(cfg)
    err = exc.value.to_dict()
    assert err["context"]["field"] == field
    assert err["module"] == "model"


def test_missing_field():
    with pytest.raises(ModelConfigError) as exc:
        model_from_dict({"d": 2, "T": 1, "kappa": 0.5, "model": "quadratic", "b": 1})
    assert exc.value.context["field"] == "M"

import numpy as np
import pytest

from conftest import make_quadratic
from hjblab.problem import (CoefficientError, IsotropicSigma, ProblemError, closed_form_problem,
                            control_bound_radius, validate_assumptions)
from hjblab.solver import hamiltonian_min


def test_closed_form_pde_residual():
    # u = x + (t - T)/2: u_t - |Du|^2/2 + u_xx/2 = 1/2 - 1/2 + 0
    p = closed_form_problem()
    x = np.linspace(-3, 3, 7)[:, None]
    assert np.allclose(p.g(x), x[:, 0])
    val, arg = hamiltonian_min(p, 0.3, [0.7], [1.0], 10.0)
    assert 0.5 + val == pytest.approx(0.0, abs=1e-15)
    assert arg[0] == pytest.approx(-1.0)


def test_zero_data_problem():
    p = make_quadratic()
    x = np.linspace(-2, 2, 5)[:, None]
    assert np.all(p.g(x) == 0)
    assert np.all(p.f(0.5, x, np.zeros_like(x)) == 0)


def test_abs_terminal_passes_audit():
    p = make_quadratic(d=2, g_slope=[1.0, 0.0], g_mode="abs")
    assert p.constants.L_g == 1.0
    rep = validate_assumptions(p, 4000, 3.0, seed=7)
    assert rep.passed
    assert rep["L_g"].estimated <= 1.0 + 1e-12
    assert rep["L_g"].estimated > 0.9


def test_constant_sigma_ellipticity():
    rep = validate_assumptions(make_quadratic(g_slope=1.0), 500, 2.0, seed=0)
    assert rep["eta_sigma"].estimated == pytest.approx(1.0)
    assert rep["eta_sigma"].passed


def test_identity_terminal_lipschitz_estimate():
    rep = validate_assumptions(make_quadratic(g_slope=1.0), 10_000, 2.0, seed=3)
    assert rep["L_g"].estimated == pytest.approx(1.0, abs=1e-9)
    assert rep["L_g"].passed


def test_declared_drift_constant_too_small():
    p = make_quadratic(b2=1.0, sigma=0.5, constants={"L_b": 0.0})
    rep = validate_assumptions(p, 500, 2.0, seed=0)
    assert not rep["L_b"].passed
    assert rep["L_b"].estimated > 0
    assert not rep.passed


def test_loosening_declared_constant_keeps_pass():
    base = make_quadratic(g_slope=1.0)
    loose = make_quadratic(g_slope=1.0, constants={"L_g": 2.0, "L_b": 5.0})
    a = validate_assumptions(base, 500, 2.0, seed=4)
    b = validate_assumptions(loose, 500, 2.0, seed=4)
    for ra in a.records:
        if ra.passed:
            assert b[ra.name].passed


def test_estimate_is_lower_bound():
    rep = validate_assumptions(make_quadratic(b2=0.5, g_slope=[2.0]), 300, 2.0, seed=1)
    assert rep["L_g"].estimated <= 2.0 + 1e-12


def test_nonfinite_coefficient_names_it():
    p = make_quadratic(g_slope=1.0).with_terminal(lambda x: np.where(x[:, 0] > 1, np.nan, 0.0), 1.0)
    with pytest.raises(CoefficientError, match="g"):
        validate_assumptions(p, 200, 2.0, seed=0)


@pytest.mark.parametrize("L_A,K,expected", [(1.0, 0.0, 1.0), (1.0, 1.0, 2.0), (2.5, 3.0, 10.0)])
def test_control_bound_radius(L_A, K, expected):
    k = closed_form_problem().constants.replace(L_A=L_A)
    assert control_bound_radius(k, K) == expected


def test_control_bound_radius_rejects_nonfinite():
    with pytest.raises(ProblemError):
        control_bound_radius(closed_form_problem().constants, np.inf)


def test_rejects_nonpositive_ellipticity():
    with pytest.raises(ProblemError):
        make_quadratic(sigma=0.0)
    with pytest.raises(ProblemError):
        IsotropicSigma(-1.0)


def test_rejects_nonfinite_parameters():
    with pytest.raises(ProblemError):
        make_quadratic(g_slope=np.nan)
    with pytest.raises(ProblemError):
        make_quadratic(T=np.inf)


@pytest.mark.parametrize("p_vec", [[1.0, 0.0], [0.3, -2.0], [0.0, 0.0]])
def test_quadratic_minimum_closed_form(p_vec):
    p = make_quadratic(d=2, sigma=1.5)
    val, arg = hamiltonian_min(p, 0.0, [0.0, 0.0], p_vec, 100.0)
    s = 1.5 * np.asarray(p_vec)
    assert val == pytest.approx(-0.5 * s @ s)
    np.testing.assert_allclose(arg, -s)

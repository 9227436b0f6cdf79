import numpy as np
import pytest

from hjblab.grid import build_grid
from hjblab.problem import (AffineDrift, IsotropicSigma, ScalarField, closed_form_problem,
                            quadratic_problem, zero_problem)
from hjblab.solver import SchemeConfig


def make_quadratic(d=1, T=1.0, c=0.0, b2=0.0, b2_offset=0.0, b2_clamp=None, sigma=1.0,
                   f2_slope=0.0, f2_offset=0.0, f2_mode="affine", f2_clamp=None,
                   g_slope=0.0, g_offset=0.0, g_mode="affine", g_clamp=None, constants=None):
    """Quadratic-family problem from scalar knobs (isotropic in every axis)."""
    eye = np.eye(d)
    return quadratic_problem(
        d, T, c,
        AffineDrift(b2 * eye, np.full(d, float(b2_offset)), b2_clamp),
        IsotropicSigma(sigma),
        ScalarField(np.broadcast_to(f2_slope, (d,)).astype(float), f2_offset, f2_mode, f2_clamp, T=T),
        ScalarField(np.broadcast_to(g_slope, (d,)).astype(float), g_offset, g_mode, g_clamp, T=T),
        constants,
    )


@pytest.fixture
def closed_form():
    return closed_form_problem()


@pytest.fixture
def zero():
    return zero_problem()


@pytest.fixture
def small_grid():
    return build_grid([0.0], 4.0, 33, 32, 1.0)


@pytest.fixture
def implicit():
    return SchemeConfig()


@pytest.fixture(scope="session")
def cf_small_solution():
    """Closed-form problem solved on a small grid with escalation."""
    from hjblab.solver import solve_with_truncation_escalation
    p = closed_form_problem()
    grid = build_grid([0.0], 4.0, 33, 32, 1.0)
    return p, grid, solve_with_truncation_escalation(p, grid, 0.25, 1e-6, SchemeConfig())


def as_custom(p, radius):
    """Same coefficients routed through the generic mesh minimiser on a control ball."""
    from hjblab.problem import CUSTOM, HJBProblem
    return HJBProblem(p.d, p.T, p.c, p.b1, p.b2, p.sigma, p.f1, p.f2, p.g, p.constants,
                      radius, CUSTOM, p.specs)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, collected by test_acceptance."""
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)

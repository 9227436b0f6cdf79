import numpy as np
import pytest

from conftest import as_custom, make_quadratic
from hjblab.estimates import sup_gradient
from hjblab.grid import build_grid, gradient_field
from hjblab.problem import closed_form_problem, zero_problem
from hjblab.solver import (EXPLICIT, MONOTONE_BOUNDARY, CFLError, ControlField, EscalationError,
                           PolicyIterationError, SchemeConfig, cfl_limit, hamiltonian_min, solve,
                           solve_with_truncation_escalation, step_backward, synthesize_feedback,
                           terminal_layer)


def exact_cf(grid):
    x = grid.nodes()[:, 0]
    return np.stack([x + (t - grid.T) / 2 for t in grid.times])


# -- Hamiltonian ---------------------------------------------------------------

def test_hamiltonian_identity_sigma_2d():
    val, arg = hamiltonian_min(make_quadratic(d=2), 0.0, [0.0, 0.0], [1.0, 0.0], 10.0)
    assert val == pytest.approx(-0.5)
    np.testing.assert_allclose(arg, [-1.0, 0.0])


def test_hamiltonian_projection():
    p = make_quadratic()
    val, arg = hamiltonian_min(p, 0.0, [0.0], [1.0], 0.5)
    assert val == pytest.approx(-0.375)
    assert arg[0] == pytest.approx(-0.5)


def test_hamiltonian_projection_mesh_route_agrees():
    p = as_custom(make_quadratic(), 0.5)
    val, arg = hamiltonian_min(p, 0.0, [0.0], [1.0], 0.5, m_alpha=20)
    assert val == pytest.approx(-0.375)
    assert arg[0] == pytest.approx(-0.5)


def test_hamiltonian_zero_gradient():
    for p in (make_quadratic(d=2), as_custom(make_quadratic(d=2), 3.0)):
        val, arg = hamiltonian_min(p, 0.0, [0.2, 0.1], [0.0, 0.0], 3.0)
        assert val == 0.0
        assert np.all(arg == 0.0)


def test_mesh_minimum_converges_to_closed_form():
    errs = []
    for m in (5, 20, 80):
        val, _ = hamiltonian_min(as_custom(make_quadratic(d=2), 5.0), 0.0, [0, 0], [0.37, -0.81], 5.0, m)
        errs.append(abs(val - (-0.5 * (0.37**2 + 0.81**2))))
    assert errs[2] <= errs[1] <= errs[0]
    assert errs[2] < 1e-3


# -- single steps --------------------------------------------------------------

@pytest.mark.parametrize("mode", ["implicit", "explicit"])
def test_zero_layer_is_fixed_point(mode):
    p = zero_problem()
    g = build_grid([0.0], 2.0, 17, 100, 1.0)
    cfg = SchemeConfig(mode=EXPLICIT) if mode == "explicit" else SchemeConfig()
    layer, ctrl = step_backward(p, g, np.zeros(g.shape), 0.5, 1.0, cfg)
    assert np.all(layer == 0.0) and np.all(ctrl == 0.0)


def test_explicit_step_from_affine_terminal():
    # u(T - dt, x) = x - dt/2: the Hamiltonian term -|Du|^2/2 lowers the value going backward
    p = closed_form_problem()
    g = build_grid([0.0], 4.0, 33, 1000, 1.0)
    x = g.axis()
    layer, ctrl = step_backward(p, g, x.copy(), 1.0 - g.dt, 4.0, SchemeConfig(mode=EXPLICIT))
    np.testing.assert_allclose(layer[1:-1], x[1:-1] - g.dt / 2, atol=1e-14)
    np.testing.assert_allclose(ctrl[1:-1, 0], -1.0, atol=1e-14)


@pytest.mark.parametrize("k", [-2.0, 0.0, 3.5])
def test_constant_terminal_is_steady(k):
    p = make_quadratic(g_offset=k)
    g = build_grid([0.0], 2.0, 17, 8, 1.0)
    u, _ = solve(p, g, 1.0, SchemeConfig())
    np.testing.assert_allclose(u.values, k, atol=1e-13)


def test_cfl_violation_rejected():
    p = closed_form_problem()
    g = build_grid([0.0], 4.0, 129, 4, 1.0)
    with pytest.raises(CFLError):
        solve(p, g, 2.0, SchemeConfig(mode=EXPLICIT))


def test_cfl_formula():
    p = make_quadratic(sigma=2.0, b2_offset=0.5)
    g = build_grid([0.0], 2.0, 9, 10, 1.0)
    h = 0.5
    assert cfl_limit(p, g, 1.0) == pytest.approx(h**2 / (4.0 + h * (2.0 + 0.5)))


# -- full solves ---------------------------------------------------------------

def test_terminal_layer_exact(closed_form, small_grid):
    u, _ = solve(closed_form, small_grid, 2.0, SchemeConfig())
    np.testing.assert_array_equal(u.values[-1], terminal_layer(closed_form, small_grid))
    np.testing.assert_array_equal(u.values[-1], small_grid.axis())


def test_closed_form_small_grid(closed_form, small_grid):
    u, ctrl = solve(closed_form, small_grid, 2.0, SchemeConfig())
    core = small_grid.core_mask(0.6)
    err = np.max(np.abs(u.values - exact_cf(small_grid))[:, core])
    assert err <= 2 * (small_grid.h + small_grid.dt)
    assert err < 1e-12


def test_explicit_mode_closed_form():
    p = closed_form_problem()
    g = build_grid([0.0], 4.0, 33, 200, 1.0)
    u, _ = solve(p, g, 2.0, SchemeConfig(mode=EXPLICIT))
    assert np.max(np.abs(u.values - exact_cf(g))[:, g.core_mask(0.6)]) < 1e-12


def test_zero_problem_exact_zeros():
    p = zero_problem(2)
    g = build_grid([0.0, 0.0], 2.0, 9, 4, 1.0)
    u, ctrl = solve(p, g, 1.0, SchemeConfig())
    assert np.all(u.values == 0.0) and np.all(ctrl.controls == 0.0)


def test_lipschitz_terminal_gradient_not_increased():
    p = make_quadratic(g_slope=1.0, g_mode="abs")
    g = build_grid([0.0], 4.0, 65, 64, 1.0)
    u, _ = solve(p, g, 4.0, SchemeConfig())
    for layer in u.values:
        gr = np.abs(gradient_field(layer, g.h))[g.core_mask(0.6)]
        assert gr.max() <= 1.0 + 1e-9


def test_constant_shift():
    g = build_grid([0.0], 3.0, 25, 16, 1.0)
    base = make_quadratic(b2=0.5, b2_clamp=2.0, f2_slope=0.5, f2_mode="clamped", f2_clamp=1.0,
                          g_slope=1.0, g_mode="abs")
    shifted = make_quadratic(b2=0.5, b2_clamp=2.0, f2_slope=0.5, f2_mode="clamped", f2_clamp=1.0,
                             g_slope=1.0, g_mode="abs", g_offset=1.75)
    u1, _ = solve(base, g, 4.0, SchemeConfig())
    u2, _ = solve(shifted, g, 4.0, SchemeConfig())
    np.testing.assert_allclose(u2.values - u1.values, 1.75, atol=1e-12)


@pytest.mark.parametrize("boundary", ["linear", MONOTONE_BOUNDARY])
def test_comparison_principle(boundary):
    g = build_grid([0.0], 3.0, 33, 32, 1.0)
    cfg = SchemeConfig(boundary=boundary)
    kw = dict(b2=0.5, b2_clamp=2.0, f2_slope=0.5, f2_mode="clamped", f2_clamp=1.0)
    p1 = make_quadratic(g_slope=1.0, g_mode="abs", **kw)
    p2 = make_quadratic(g_slope=1.0, g_mode="abs", g_offset=0.0, **kw).with_terminal(
        lambda x: np.abs(x[:, 0]) + 0.3 * np.maximum(0.0, 1 - np.abs(x[:, 0] - 1)), 1.3)
    u1, _ = solve(p1, g, 4.0, cfg)
    u2, _ = solve(p2, g, 4.0, cfg)
    diff = (u1.values - u2.values)
    if boundary == MONOTONE_BOUNDARY:
        assert diff.max() <= 1e-12
    else:
        assert diff[:, g.core_mask(0.6)].max() <= 1e-12


def test_policy_residual_nonincreasing():
    p = make_quadratic(b2=0.5, b2_clamp=2.0, g_slope=1.0, g_mode="abs", sigma=0.7)
    g = build_grid([0.0], 3.0, 33, 8, 1.0)
    stats = {}
    solve(p, g, 4.0, SchemeConfig(), stats)
    assert max(stats["sweeps"]) >= 2
    for res in stats["residuals"]:
        assert all(b <= a * (1 + 1e-9) + 1e-15 for a, b in zip(res, res[1:]))


def test_policy_iteration_sweep_limit():
    p = make_quadratic(b2=0.5, b2_clamp=2.0, g_slope=1.0, g_mode="abs", sigma=0.7)
    g = build_grid([0.0], 3.0, 33, 8, 1.0)
    with pytest.raises(PolicyIterationError) as exc:
        solve(p, g, 4.0, SchemeConfig(max_sweeps=1, tol_policy=1e-15))
    assert isinstance(exc.value.residuals, list)


# -- feedback and escalation ---------------------------------------------------

def test_feedback_closed_form(closed_form, small_grid):
    u, _ = solve(closed_form, small_grid, 2.0, SchemeConfig())
    fb = synthesize_feedback(closed_form, u, 2.0, 20)
    np.testing.assert_allclose(fb.controls[:, 1:-1, 0], -1.0, atol=1e-12)


def test_feedback_zero():
    g = build_grid([0.0], 2.0, 9, 4, 1.0)
    u, _ = solve(zero_problem(), g, 1.0, SchemeConfig())
    assert np.all(synthesize_feedback(zero_problem(), u, 1.0, 20).controls == 0.0)


@pytest.mark.parametrize("R", [0.3, 1.0, 5.0])
def test_feedback_bounded_by_sigma_gradient(R):
    p = make_quadratic(b2=0.5, b2_clamp=2.0, g_slope=2.0, g_mode="abs", sigma=0.7)
    g = build_grid([0.0], 3.0, 33, 8, 1.0)
    u, _ = solve(p, g, 4.0, SchemeConfig())
    fb = synthesize_feedback(p, u, R, 20)
    Du = np.stack([gradient_field(layer, g.h) for layer in u.values])
    assert np.all(fb.norms() <= 0.7 * np.linalg.norm(Du, axis=-1) + fb.resolution + 1e-12)
    assert np.all(fb.norms() <= R + 1e-12)


def test_escalation_closed_form(cf_small_solution):
    p, grid, (u, ctrl, trace) = cf_small_solution
    radii = [s.radius for s in trace.stages]
    assert radii[0] == 0.25
    assert all(b == 2 * a for a, b in zip(radii, radii[1:]))
    assert trace.converged
    assert trace.final_radius >= 2.0
    assert trace.stages[-1].delta_sup <= 1e-6 * u.sup_norm()


def test_escalation_zero_problem():
    g = build_grid([0.0], 2.0, 9, 4, 1.0)
    u, ctrl, trace = solve_with_truncation_escalation(zero_problem(), g, 1.0, 1e-6, SchemeConfig())
    assert len(trace.stages) == 2 and trace.converged
    assert np.all(ctrl.controls == 0.0)


def test_escalation_steep_terminal():
    p = make_quadratic(g_slope=3.0)
    g = build_grid([0.0], 4.0, 33, 32, 1.0)
    u, _, trace = solve_with_truncation_escalation(p, g, 0.25, 1e-6, SchemeConfig())
    assert sup_gradient(u) == pytest.approx(3.0, rel=1e-9)
    assert trace.final_radius >= p.constants.L_A * (1 + 3.0)


def test_escalation_failure_carries_trace():
    g = build_grid([0.0], 4.0, 33, 32, 1.0)
    with pytest.raises(EscalationError) as exc:
        solve_with_truncation_escalation(closed_form_problem(), g, 0.25, 1e-6, SchemeConfig(), 0)
    assert len(exc.value.trace.stages) == 1
    assert not exc.value.trace.converged


def test_truncation_stability(cf_small_solution):
    p, grid, (u, _, trace) = cf_small_solution
    u2, _ = solve(p, grid, 2 * trace.final_radius, SchemeConfig())
    assert np.max(np.abs(u2.values - u.values)) <= 1e-6 * u.sup_norm()


def test_control_field_shape_checked(small_grid):
    with pytest.raises(ValueError):
        ControlField(small_grid, np.zeros((3, 3, 1)))

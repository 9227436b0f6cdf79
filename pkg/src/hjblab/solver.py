"""Monotone finite-difference solver for the HJB equation.

Backward in time, either explicit (CFL-restricted) or implicit with policy
iteration. Drift is upwinded per axis, diffusion uses central differences
and the monotone cross splitting, the discount enters through ``(1 + c dt)``
on the known layer. The box boundary uses linearly extrapolated ghosts.

Extrapolated ghosts make the scheme exact on affine data but give a
negative weight wherever the upwind drift points out of the box. The
``monotone`` closure drops those drift terms instead: every stencil is then
monotone, at the price of an O(1) error on outflow boundary nodes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .grid import Grid, ValueFunction, gradient_field, one_sided_differences
from .problem import CoefficientError, HJBProblem, control_bound_radius
from .stencil import LinearGhost, assemble

log = logging.getLogger(__name__)

EXPLICIT = "explicit-monotone"
IMPLICIT = "implicit-policy-iteration"
MONOTONE_BOUNDARY = "monotone"
LINEAR_BOUNDARY = "linear"


class SolverError(RuntimeError):
    pass


class CFLError(SolverError):
    pass


class PolicyIterationError(SolverError):
    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = list(residuals)


class EscalationError(SolverError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SchemeConfig:
    mode: str = IMPLICIT
    m_alpha: int = 20
    tol_policy: float = 1e-10
    max_sweeps: int = 50
    lin_tol: float = 1e-9
    # "linear": ghosts 2u_0 - u_1 everywhere; "monotone": the same ghosts for
    # diffusion, drift pointing out of the box dropped
    boundary: str = LINEAR_BOUNDARY

    def __post_init__(self):
        if self.mode not in (EXPLICIT, IMPLICIT):
            raise ValueError(f"unknown time stepping {self.mode!r}")
        if self.boundary not in (MONOTONE_BOUNDARY, LINEAR_BOUNDARY):
            raise ValueError(f"unknown boundary closure {self.boundary!r}")
        if int(self.m_alpha) != self.m_alpha or self.m_alpha < 1:
            raise ValueError("m_alpha must be a positive integer")
        if not self.tol_policy > 0 or not self.lin_tol > 0:
            raise ValueError("tolerances must be positive")
        if int(self.max_sweeps) != self.max_sweeps or self.max_sweeps < 1:
            raise ValueError("max_sweeps must be a positive integer")


@dataclass
class ControlField:
    grid: Grid
    controls: np.ndarray = field(repr=False)
    radius: float = math.inf
    resolution: float = 0.0

    def __post_init__(self):
        expected = (self.grid.n_t + 1,) + self.grid.shape + (self.grid.d,)
        if self.controls.shape != expected:
            raise ValueError(f"controls have shape {self.controls.shape}, expected {expected}")

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.controls, axis=-1)


@dataclass(frozen=True)
class TruncationStage:
    radius: float
    sup_grad: float
    delta_sup: float  # nan for the first stage


@dataclass
class TruncationTrace:
    stages: list = field(default_factory=list)
    final_radius: float = math.nan
    converged: bool = False
    tol: float = math.nan


# -- control meshes ----------------------------------------------------------

def _fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def control_mesh(d: int, R: float, m: int) -> np.ndarray:
    """Polar product mesh of the closed ball ``B(0, R)``.

    ``m`` radii times a direction set fine enough that every point of the
    ball lies within ``R / m`` of the mesh. Rows are ordered by norm, then
    lexicographically, so ``argmin`` breaks ties deterministically.
    """
    radii = R * np.arange(1, m + 1) / m
    if d == 1:
        dirs = np.array([[-1.0], [1.0]])
    elif d == 2:
        n_dir = int(math.ceil(2 * math.pi * m))
        ang = 2 * math.pi * np.arange(n_dir) / n_dir
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    elif d == 3:
        dirs = _fibonacci_sphere(int(math.ceil(8 * math.pi * m * m)))
    else:
        raise SolverError("control mesh supports d <= 3 only")
    pts = np.concatenate([np.zeros((1, d)), (radii[:, None, None] * dirs[None]).reshape(-1, d)])
    order = np.lexsort(tuple(pts[:, k] for k in reversed(range(d))) + (np.linalg.norm(pts, axis=1).round(12),))
    return pts[order]


def mesh_resolution(R: float, m: int) -> float:
    return R / m


def _diagonal_sigma(p: HJBProblem, t, x):
    s = p.sigma(t, x)
    diag = np.einsum("nkk->nk", s)
    off = np.abs(s).sum(axis=(1, 2)) - np.abs(diag).sum(axis=1)
    return diag, bool(np.all(off <= 1e-14 * np.maximum(1.0, np.abs(diag).max(axis=1))))


def _check(name, arr, x, t):
    bad = ~np.isfinite(arr)
    if np.any(bad):
        row = np.argwhere(bad)[0][0]
        raise CoefficientError(name, t, x[row])
    return arr


# -- Hamiltonian minimisation ------------------------------------------------

def hamiltonian_min_batch(p: HJBProblem, t: float, x: np.ndarray, grad: np.ndarray,
                          R: float, m_alpha: int):
    """Minimise ``b1(t,x,a).grad + f1(t,x,a)`` over ``|a| <= R`` at many points.

    The quadratic family is solved in closed form: the minimiser of
    ``(sigma^T a).p + |a|^2/2`` is ``-sigma p`` projected onto the ball
    (``-sigma^T p`` for the symmetric sigma of the built-in families).
    Otherwise a control mesh is searched.
    """
    if not R > 0:
        raise SolverError(f"control radius must be positive, got {R}")
    x = np.atleast_2d(x)
    grad = np.atleast_2d(grad)
    if p.is_quadratic:
        s = _check("sigma", p.sigma(t, x), x, t)
        q = np.einsum("nij,nj->ni", s, grad)
        nq = np.linalg.norm(q, axis=1)
        scale = np.where(nq > R, R / np.where(nq > 0, nq, 1.0), 1.0)
        arg = -q * scale[:, None]
        val = np.sum(arg * q, axis=1) + 0.5 * np.sum(arg * arg, axis=1)
        return val, arg
    mesh = control_mesh(p.d, R, m_alpha)
    n, m = x.shape[0], mesh.shape[0]
    xr = np.repeat(x, m, axis=0)
    ar = np.tile(mesh, (n, 1))
    b1 = _check("b1", p.b1(t, xr, ar), xr, t).reshape(n, m, -1)
    f1 = _check("f1", p.f1(t, xr, ar), xr, t).reshape(n, m)
    obj = np.einsum("nmk,nk->nm", b1, grad) + f1
    j = np.argmin(obj, axis=1)
    return obj[np.arange(n), j], mesh[j]


def hamiltonian_min(p: HJBProblem, t: float, x, grad, R: float, m_alpha: int = 20):
    val, arg = hamiltonian_min_batch(p, t, np.atleast_1d(np.asarray(x, float))[None],
                                     np.atleast_1d(np.asarray(grad, float))[None], R, m_alpha)
    return float(val[0]), arg[0]


def _axis_argmin(s, c, P, M, kappa, bound):
    """Minimise ``kappa a^2/2 + max(s a + c, 0) P + min(s a + c, 0) M`` on ``|a| <= bound``."""
    def phi(a):
        drift = s * a + c
        return 0.5 * kappa * a * a + np.maximum(drift, 0.0) * P + np.minimum(drift, 0.0) * M

    with np.errstate(divide="ignore", invalid="ignore"):
        a0 = np.where(s != 0, -c / np.where(s != 0, s, 1.0), 0.0)
    lo_pos = np.where(s > 0, a0, -np.inf)   # region drift >= 0
    hi_pos = np.where(s < 0, a0, np.inf)
    lo_neg = np.where(s < 0, a0, -np.inf)   # region drift <= 0
    hi_neg = np.where(s > 0, a0, np.inf)
    zero_s = s == 0
    lo_pos = np.where(zero_s & (c < 0), np.inf, lo_pos)
    lo_neg = np.where(zero_s & (c > 0), np.inf, lo_neg)

    cands = []
    for target, lo, hi in ((-s * P / kappa, lo_pos, hi_pos), (-s * M / kappa, lo_neg, hi_neg)):
        lo = np.maximum(lo, -bound)
        hi = np.minimum(hi, bound)
        feasible = lo <= hi
        a = np.clip(target, lo, np.where(feasible, hi, lo))
        val = np.where(feasible, phi(np.where(feasible, a, 0.0)), np.inf)
        cands.append((np.where(feasible, a, 0.0), val))
    (a1, v1), (a2, v2) = cands
    pick2 = (v2 < v1) | ((v2 == v1) & ((np.abs(a2) < np.abs(a1)) | ((np.abs(a2) == np.abs(a1)) & (a2 < a1))))
    return np.where(pick2, a2, a1)


def upwind_min(p: HJBProblem, t: float, x: np.ndarray, Dp: np.ndarray, Dm: np.ndarray,
               R: float, m_alpha: int):
    """Pointwise minimiser of the upwinded discrete Hamiltonian.

    Minimises ``sum_k max(b_k, 0) Dp_k + min(b_k, 0) Dm_k + f1`` with
    ``b = b1 + b2`` over ``|alpha| <= R``. Returns the control array.
    """
    n, d = x.shape
    b2 = _check("b2", p.b2(t, x), x, t)
    if p.is_quadratic:
        sdiag, diagonal = _diagonal_sigma(p, t, x)
        if diagonal:
            if d == 1:
                return _axis_argmin(sdiag, b2, Dp, Dm, 1.0, R)
            alpha = _axis_argmin(sdiag, b2, Dp, Dm, 1.0, np.inf)
            out = np.linalg.norm(alpha, axis=1) > R
            if np.any(out):
                alpha[out] = _ball_penalty(sdiag[out], b2[out], Dp[out], Dm[out], R)
            return alpha
    mesh = control_mesh(d, R, m_alpha)
    m = mesh.shape[0]
    xr = np.repeat(x, m, axis=0)
    ar = np.tile(mesh, (n, 1))
    b = (_check("b1", p.b1(t, xr, ar), xr, t) + np.repeat(b2, m, axis=0)).reshape(n, m, d)
    f1 = _check("f1", p.f1(t, xr, ar), xr, t).reshape(n, m)
    obj = (np.maximum(b, 0) * Dp[:, None, :] + np.minimum(b, 0) * Dm[:, None, :]).sum(axis=2) + f1
    return mesh[np.argmin(obj, axis=1)]


def _ball_penalty(s, c, P, M, R, iters=100):
    """Enforce ``|alpha| <= R`` by bisection on a quadratic penalty weight."""
    def sol(lam):
        return _axis_argmin(s, c, P, M, 1.0 + lam[:, None], np.inf)

    lo = np.zeros(s.shape[0])
    hi = np.ones(s.shape[0])
    while True:
        too_big = np.linalg.norm(sol(hi), axis=1) > R
        if not np.any(too_big):
            break
        hi = np.where(too_big, 2 * hi, hi)
        if np.max(hi) > 1e300:
            raise SolverError("ball projection failed to bracket the penalty weight")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        big = np.linalg.norm(sol(mid), axis=1) > R
        lo = np.where(big, mid, lo)
        hi = np.where(big, hi, mid)
    alpha = sol(hi)
    nrm = np.linalg.norm(alpha, axis=1, keepdims=True)
    return alpha * np.minimum(1.0, R / np.maximum(nrm, 1e-300))


# -- time stepping -----------------------------------------------------------

def _upwind_differences(grid: Grid, layer: np.ndarray, outward: bool = True):
    """One-sided differences; ``outward=False`` zeroes those leaving the box."""
    N, d = grid.n_nodes, grid.d
    Dp = np.empty((N, d))
    Dm = np.empty((N, d))
    for k in range(d):
        fwd, bwd = one_sided_differences(layer, grid.h, k)
        if not outward:
            fwd = fwd.copy()
            bwd = bwd.copy()
            np.moveaxis(fwd, k, 0)[-1] = 0.0
            np.moveaxis(bwd, k, 0)[0] = 0.0
        Dp[:, k] = fwd.ravel()
        Dm[:, k] = bwd.ravel()
    return Dp, Dm


def cfl_limit(p: HJBProblem, grid: Grid, R: float) -> float:
    """Largest dt keeping the explicit scheme monotone on the box."""
    x = grid.nodes()
    t_samples = np.linspace(0.0, p.T, 5)
    a_max, b_max = 0.0, 0.0
    for t in t_samples:
        a = p.diffusion(t, x)
        a_max = max(a_max, float(np.max(np.linalg.norm(a, 2, axis=(1, 2)))))
        s = p.sigma(t, x)
        b2 = np.abs(p.b2(t, x)).sum(axis=1)
        # |b1|_1 over the ball bounded by sqrt(d) ||sigma^T||_2 R for the quadratic family
        if p.is_quadratic:
            b1 = math.sqrt(grid.d) * np.linalg.norm(s, 2, axis=(1, 2)) * R
        else:
            mesh = control_mesh(grid.d, R, 4)
            b1 = np.max([np.abs(p.b1(t, x, np.tile(a, (x.shape[0], 1)))).sum(axis=1)
                         for a in mesh], axis=0)
        b_max = max(b_max, float(np.max(b1 + b2)))
    return grid.h**2 / (grid.d * a_max + grid.h * b_max)


def check_cfl(p: HJBProblem, grid: Grid, R: float):
    limit = cfl_limit(p, grid, R)
    if grid.dt > limit * (1 + 1e-12):
        raise CFLError(f"explicit scheme needs dt <= {limit:.6g}, grid has dt = {grid.dt:.6g}")


def step_backward(p: HJBProblem, grid: Grid, u_next: np.ndarray, t: float, R: float,
                  cfg: SchemeConfig, stats: dict | None = None):
    """Advance from the layer at ``t + dt`` to the layer at ``t``.

    Returns ``(layer, controls)``; ``controls`` is the scheme's policy with
    shape ``grid.shape + (d,)``.
    """
    if not np.all(np.isfinite(u_next)):
        raise SolverError("u_next has nonfinite entries")
    R = p.effective_radius(R)
    dt, c = grid.dt, p.c
    x = grid.nodes()
    ghost = LinearGhost()
    linear = cfg.boundary == LINEAR_BOUNDARY
    rhs0 = (1.0 + c * dt) * u_next.ravel()

    if cfg.mode == EXPLICIT:
        s = t + dt
        Dp, Dm = _upwind_differences(grid, u_next, linear)
        alpha = upwind_min(p, s, x, Dp, Dm, R, cfg.m_alpha)
        L = assemble(grid, _check("sigma", p.diffusion(s, x), x, s),
                     _check("b", p.drift(s, x, alpha), x, s), ghost, linear)
        f = _check("f", p.f(s, x, alpha), x, s)
        new = rhs0 + dt * (L @ u_next.ravel() + f)
        return new.reshape(grid.shape), alpha.reshape(grid.shape + (grid.d,))

    a = _check("sigma", p.diffusion(t, x), x, t)
    eye = sp.identity(grid.n_nodes, format="csr")
    Dp, Dm = _upwind_differences(grid, u_next, linear)
    alpha = upwind_min(p, t, x, Dp, Dm, R, cfg.m_alpha)
    u = None
    residuals = []
    for sweep in range(cfg.max_sweeps):
        b = _check("b", p.drift(t, x, alpha), x, t)
        f = _check("f", p.f(t, x, alpha), x, t)
        A = (eye - dt * assemble(grid, a, b, ghost, linear)).tocsc()
        rhs = rhs0 + dt * f
        u_new = spsolve(A, rhs)
        lin_res = float(np.max(np.abs(A @ u_new - rhs)))
        if not lin_res <= cfg.lin_tol * max(1.0, float(np.max(np.abs(rhs)))):
            raise SolverError(f"linear solve residual {lin_res:.3g} above tolerance at t={t}")
        scale = max(1.0, float(np.max(np.abs(u_new))))
        if u is not None:
            residuals.append(float(np.max(np.abs(u_new - u))))
        u = u_new
        Dp, Dm = _upwind_differences(grid, u.reshape(grid.shape), linear)
        alpha_new = upwind_min(p, t, x, Dp, Dm, R, cfg.m_alpha)
        d_alpha = float(np.max(np.abs(alpha_new - alpha)))
        alpha = alpha_new
        if d_alpha <= cfg.tol_policy * max(1.0, R) or (residuals and residuals[-1] <= cfg.tol_policy * scale):
            break
    else:
        raise PolicyIterationError(
            f"policy iteration did not converge in {cfg.max_sweeps} sweeps at t={t}", residuals
        )
    if stats is not None:
        stats.setdefault("sweeps", []).append(sweep + 1)
        stats.setdefault("residuals", []).append(residuals)
    return u.reshape(grid.shape), alpha.reshape(grid.shape + (grid.d,))


def terminal_layer(p: HJBProblem, grid: Grid) -> np.ndarray:
    return p.terminal(grid.nodes()).reshape(grid.shape)


def solve(p: HJBProblem, grid: Grid, R: float, cfg: SchemeConfig, stats: dict | None = None):
    """Backward sweep from ``u(T) = g``; returns ``(ValueFunction, ControlField)``."""
    if not R > 0:
        raise SolverError(f"control radius must be positive, got {R}")
    if grid.d != p.d:
        raise SolverError(f"grid dimension {grid.d} does not match problem dimension {p.d}")
    if abs(grid.T - p.T) > 1e-12 * p.T:
        raise SolverError(f"grid horizon {grid.T} does not match problem horizon {p.T}")
    if cfg.mode == EXPLICIT:
        check_cfl(p, grid, p.effective_radius(R))
    values = np.empty((grid.n_t + 1,) + grid.shape)
    values[-1] = terminal_layer(p, grid)
    for j in range(grid.n_t - 1, -1, -1):
        values[j], _ = step_backward(p, grid, values[j + 1], j * grid.dt, R, cfg, stats)
    u = ValueFunction(grid, values)
    return u, synthesize_feedback(p, u, R, cfg.m_alpha)


def synthesize_feedback(p: HJBProblem, u: ValueFunction, R: float, m_alpha: int) -> ControlField:
    """Feedback ``argmin_a [b1.Du + f1]`` at every node, using central gradients."""
    grid = u.grid
    R = p.effective_radius(R)
    x = grid.nodes()
    out = np.empty((grid.n_t + 1, grid.n_nodes, grid.d))
    for j, t in enumerate(grid.times):
        if not np.all(np.isfinite(u.values[j])):
            raise SolverError(f"value layer {j} has nonfinite entries")
        g = gradient_field(u.values[j], grid.h).reshape(-1, grid.d)
        _, out[j] = hamiltonian_min_batch(p, t, x, g, R, m_alpha)
    resolution = 0.0 if p.is_quadratic else mesh_resolution(R, m_alpha)
    return ControlField(grid, out.reshape((grid.n_t + 1,) + grid.shape + (grid.d,)), R, resolution)


def solve_with_truncation_escalation(p: HJBProblem, grid: Grid, R_0: float, tol: float,
                                     cfg: SchemeConfig, max_doublings: int = 12,
                                     core_fraction: float = 0.6):
    """Solve on ``A ∩ B(0, R)`` for ``R = R_0, 2 R_0, ...`` until stable.

    Stops once consecutive solutions differ by at most ``tol`` times the
    value scale and the radius clears ``L_A (1 + K)``, ``K`` being the
    measured core gradient bound.
    """
    from .estimates import sup_gradient

    if not (R_0 > 0 and tol > 0):
        raise SolverError("R_0 and tol must be positive")
    trace = TruncationTrace(tol=tol)
    prev = None
    for stage in range(max_doublings + 1):
        R = R_0 * 2.0**stage
        u, ctrl = solve(p, grid, R, cfg)
        K = sup_gradient(u, core_fraction)
        delta = math.nan if prev is None else float(np.max(np.abs(u.values - prev.values)))
        trace.stages.append(TruncationStage(R, K, delta))
        log.debug("escalation stage %d: R=%g sup|Du|=%g delta=%g", stage, R, K, delta)
        scale = u.sup_norm() or 1.0
        target = control_bound_radius(p.constants, K)
        if prev is not None and delta <= tol * scale and R >= target * (1 - 1e-9):
            trace.final_radius = R
            trace.converged = True
            return u, ctrl, trace
        prev = u
    trace.final_radius = R
    raise EscalationError(
        f"truncation escalation did not stabilise within {max_doublings} doublings", trace
    )

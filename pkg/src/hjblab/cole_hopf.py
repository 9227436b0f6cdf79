"""Linear route for the quadratic family via ``v = exp(-u)``.

With ``b1 = sigma^T alpha`` and ``f1 = |alpha|^2/2`` and no discount, the
HJB equation becomes the linear backward equation

    v_t + b2.Dv + 1/2 Tr[sigma sigma^T D^2 v] - f2 v = 0,   v(T) = exp(-g).

The same monotone stencils are used. The box boundary continues ``v``
geometrically, with face ratios lagged one time step: this is the image of
the linear-extrapolation ghost used for ``u``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .grid import Grid, ValueFunction
from .problem import HJBProblem
from .solver import SchemeConfig, SolverError, solve_with_truncation_escalation
from .stencil import RatioGhost, assemble


class UnsupportedTransform(ValueError):
    pass


class PositivityError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LinearParabolicProblem:
    d: int
    T: float
    b2: Callable
    diffusion: Callable
    f2: Callable
    v_T: Callable


def to_linear(p: HJBProblem) -> LinearParabolicProblem:
    if not p.is_quadratic:
        raise UnsupportedTransform(f"Cole-Hopf route needs the quadratic family, got {p.family!r}")
    if p.c != 0:
        raise UnsupportedTransform(f"Cole-Hopf route needs c = 0, got c = {p.c}")
    if p.control_radius is not None:
        raise UnsupportedTransform("Cole-Hopf route needs the unbounded control set")
    return LinearParabolicProblem(p.d, p.T, p.b2, p.diffusion, p.f2, lambda x: np.exp(-p.g(x)))


def solve_linear(lp: LinearParabolicProblem, grid: Grid, cfg: SchemeConfig | None = None) -> ValueFunction:
    """Implicit backward solve; every value must stay strictly positive."""
    x = grid.nodes()
    N = grid.n_nodes
    eye = sp.identity(N, format="csr")
    values = np.empty((grid.n_t + 1,) + grid.shape)
    vT = np.asarray(lp.v_T(x), dtype=float)
    if not np.all(np.isfinite(vT) & (vT > 0)):
        raise PositivityError("terminal datum exp(-g) is not positive and finite on the box")
    values[-1] = vT.reshape(grid.shape)
    lin_tol = cfg.lin_tol if cfg is not None else 1e-9
    for j in range(grid.n_t - 1, -1, -1):
        t = j * grid.dt
        ghost = RatioGhost.geometric(values[j + 1])
        L = assemble(grid, lp.diffusion(t, x), lp.b2(t, x), ghost)
        A = (eye - grid.dt * (L - sp.diags(lp.f2(t, x)))).tocsc()
        rhs = values[j + 1].ravel()
        v = spsolve(A, rhs)
        res = float(np.max(np.abs(A @ v - rhs)))
        if not res <= lin_tol * max(1.0, float(np.max(np.abs(rhs)))):
            raise SolverError(f"linear solve residual {res:.3g} above tolerance at t={t}")
        bad = ~(v > 0) | ~np.isfinite(v)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise PositivityError(
                f"nonpositive value {v[i]:.6g} at t={t}, node {np.unravel_index(i, grid.shape)}"
            )
        values[j] = v.reshape(grid.shape)
    return ValueFunction(grid, values)


def invert(v: ValueFunction) -> ValueFunction:
    if not np.all(v.values > 0):
        raise PositivityError("inverse transform needs strictly positive values")
    return ValueFunction(v.grid, -np.log(v.values))


def transform(u: ValueFunction) -> ValueFunction:
    return ValueFunction(u.grid, np.exp(-u.values))


@dataclass(frozen=True)
class Discrepancy:
    sup: float
    mean: float
    core_fraction: float
    h: float
    dt: float

    def rows(self):
        return [("sup_abs", self.sup), ("mean_abs", self.mean),
                ("core_fraction", self.core_fraction), ("h", self.h), ("dt", self.dt)]


def cross_check(p: HJBProblem, grid: Grid, cfg: SchemeConfig, R_0: float = 1.0,
                tol: float = 1e-6, core_fraction: float = 0.6, max_doublings: int = 12):
    """Compare the nonlinear solver with the transform route on the core box.

    Returns ``(Discrepancy, u_nonlinear, u_transform)``.
    """
    lp = to_linear(p)
    u_nl, _, _ = solve_with_truncation_escalation(p, grid, R_0, tol, cfg, max_doublings, core_fraction)
    u_ch = invert(solve_linear(lp, grid, cfg))
    mask = grid.core_mask(core_fraction)
    gap = np.abs(u_nl.values - u_ch.values)[:, mask]
    rep = Discrepancy(float(gap.max()), float(gap.mean()), core_fraction, grid.h, grid.dt)
    return rep, u_nl, u_ch


def combined_tolerance(grid: Grid, factor: float = 3.0) -> float:
    return factor * (grid.h + grid.dt)


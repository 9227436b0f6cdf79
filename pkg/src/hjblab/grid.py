"""Space-time tensor meshes, value fields, stencils and interpolation.

Spatial arrays use ``indexing='ij'`` and C-order flattening throughout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class GridError(ValueError):
    pass


class ExtrapolationError(GridError):
    pass


@dataclass(frozen=True)
class Grid:
    center: np.ndarray
    R_x: float
    n_x: int
    n_t: int
    T: float

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        if center.ndim != 1 or center.size == 0:
            raise GridError("center must be a nonempty vector")
        if not np.all(np.isfinite(center)):
            raise GridError("center must be finite")
        object.__setattr__(self, "center", center)
        if not (np.isfinite(self.R_x) and self.R_x > 0):
            raise GridError(f"R_x must be positive, got {self.R_x}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise GridError(f"T must be positive, got {self.T}")
        if int(self.n_x) != self.n_x or self.n_x < 3:
            raise GridError(f"n_x must be an integer >= 3, got {self.n_x}")
        if int(self.n_t) != self.n_t or self.n_t < 1:
            raise GridError(f"n_t must be an integer >= 1, got {self.n_t}")
        object.__setattr__(self, "n_x", int(self.n_x))
        object.__setattr__(self, "n_t", int(self.n_t))

    @property
    def d(self) -> int:
        return self.center.size

    @property
    def h(self) -> float:
        return 2.0 * self.R_x / (self.n_x - 1)

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def shape(self) -> tuple:
        return (self.n_x,) * self.d

    @property
    def n_nodes(self) -> int:
        return self.n_x**self.d

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.R_x

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.R_x

    def axis(self, k: int = 0) -> np.ndarray:
        """Node coordinates along axis ``k``: ``center - R_x + j*h``."""
        return self.center[k] - self.R_x + np.arange(self.n_x) * self.h

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_t + 1) * self.dt

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape ``(n_nodes, d)`` in C order."""
        mesh = np.meshgrid(*[self.axis(k) for k in range(self.d)], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def core_mask(self, fraction: float) -> np.ndarray:
        """Boolean mask (grid shape) of nodes in the centered inner box."""
        if not 0 < fraction <= 1:
            raise GridError(f"core fraction must lie in (0, 1], got {fraction}")
        half = fraction * self.R_x * (1 + 1e-12)
        mask = np.ones(self.shape, dtype=bool)
        for k in range(self.d):
            inside = np.abs(self.axis(k) - self.center[k]) <= half
            shape = [1] * self.d
            shape[k] = self.n_x
            mask = mask & inside.reshape(shape)
        return mask

    def same_as(self, other: "Grid") -> bool:
        return (
            np.array_equal(self.center, other.center)
            and self.R_x == other.R_x
            and self.n_x == other.n_x
            and self.n_t == other.n_t
            and self.T == other.T
        )


def build_grid(center, R_x: float, n_x: int, n_t: int, T: float) -> Grid:
    return Grid(np.atleast_1d(np.asarray(center, dtype=float)), float(R_x), n_x, n_t, float(T))


@dataclass
class ValueFunction:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        expected = (self.grid.n_t + 1,) + self.grid.shape
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != expected:
            raise GridError(f"values have shape {self.values.shape}, expected {expected}")

    @classmethod
    def zeros(cls, grid: Grid) -> "ValueFunction":
        return cls(grid, np.zeros((grid.n_t + 1,) + grid.shape))

    def layer(self, j: int) -> np.ndarray:
        return self.values[j]

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))


# -- stencils ----------------------------------------------------------------

def pad_linear(a: np.ndarray, axis: int) -> np.ndarray:
    """Append one linearly extrapolated ghost node at each end of ``axis``."""
    a = np.moveaxis(a, axis, 0)
    lo = 2.0 * a[0] - a[1]
    hi = 2.0 * a[-1] - a[-2]
    out = np.concatenate([lo[None], a, hi[None]], axis=0)
    return np.moveaxis(out, 0, axis)


def one_sided_differences(layer: np.ndarray, h: float, axis: int):
    """Forward and backward differences with linearly extrapolated ghosts.

    At a boundary node the difference pointing out of the box equals the
    inward one-sided difference.
    """
    p = np.moveaxis(pad_linear(layer, axis), axis, 0)
    u = p[1:-1]
    fwd = (p[2:] - u) / h
    bwd = (u - p[:-2]) / h
    return np.moveaxis(fwd, 0, axis), np.moveaxis(bwd, 0, axis)


def gradient_field(layer: np.ndarray, h: float) -> np.ndarray:
    """Central differences inside, one-sided at the box boundary.

    Returns an array of shape ``layer.shape + (d,)``.
    """
    d = layer.ndim
    out = np.empty(layer.shape + (d,))
    for k in range(d):
        out[..., k] = np.gradient(layer, h, axis=k, edge_order=1)
    return out


def gradient_at(u: ValueFunction, time_layer: int, node) -> np.ndarray:
    grid = u.grid
    node = tuple(int(i) for i in np.atleast_1d(node))
    if not 0 <= time_layer <= grid.n_t:
        raise IndexError(f"time layer {time_layer} outside [0, {grid.n_t}]")
    if len(node) != grid.d or any(not 0 <= i < grid.n_x for i in node):
        raise IndexError(f"node {node} outside grid of shape {grid.shape}")
    layer = u.values[time_layer]
    g = np.empty(grid.d)
    for k in range(grid.d):
        i = node[k]
        lo, hi = list(node), list(node)
        if i == 0:
            hi[k] = 1
            g[k] = (layer[tuple(hi)] - layer[node]) / grid.h
        elif i == grid.n_x - 1:
            lo[k] = i - 1
            g[k] = (layer[node] - layer[tuple(lo)]) / grid.h
        else:
            lo[k], hi[k] = i - 1, i + 1
            g[k] = (layer[tuple(hi)] - layer[tuple(lo)]) / (2 * grid.h)
    return g


# -- interpolation -----------------------------------------------------------

def _time_weights(grid: Grid, t: float):
    s = t / grid.dt
    j0 = int(np.clip(np.floor(s), 0, grid.n_t - 1))
    w = s - j0
    return j0, w


def _spatial_weights(grid: Grid, x: np.ndarray):
    s = (x - grid.lower) / grid.h
    i0 = np.clip(np.floor(s).astype(int), 0, grid.n_x - 2)
    w = s - i0
    return i0, w


def multilinear(grid: Grid, layer: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of one layer at points ``x`` of shape (P, d).

    ``layer`` may carry trailing component axes (e.g. control vectors).
    Points are assumed to lie inside the box.
    """
    i0, w = _spatial_weights(grid, x)
    d = grid.d
    tail = layer.shape[d:]
    out = np.zeros((x.shape[0],) + tail)
    for corner in itertools.product((0, 1), repeat=d):
        c = np.asarray(corner)
        weight = np.prod(np.where(c == 1, w, 1.0 - w), axis=1)
        idx = tuple((i0[:, k] + c[k]) for k in range(d))
        out += weight.reshape((-1,) + (1,) * len(tail)) * layer[idx]
    return out


def check_inside(grid: Grid, t, x: np.ndarray, slack: float = 1e-12):
    tol = slack * max(1.0, grid.R_x)
    if not (-slack * grid.T <= t <= grid.T * (1 + slack)):
        raise ExtrapolationError(f"t={t} outside [0, {grid.T}]")
    below = x < grid.lower - tol
    above = x > grid.upper + tol
    if np.any(below) or np.any(above):
        p, k = np.argwhere(below | above)[0]
        bound = grid.lower[k] if below[p, k] else grid.upper[k]
        raise ExtrapolationError(f"x[{k}]={x[p, k]} violates box bound {bound}")


def interpolate_field(grid: Grid, values: np.ndarray, t: float, x: np.ndarray) -> np.ndarray:
    """Linear-in-time, multilinear-in-space evaluation of a layered field."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    j0, w = _time_weights(grid, t)
    a = multilinear(grid, values[j0], x)
    if w == 0.0:
        return a
    b = multilinear(grid, values[j0 + 1], x)
    return (1.0 - w) * a + w * b


def interpolate(u: ValueFunction, t: float, x) -> float | np.ndarray:
    """Evaluate ``u`` at ``(t, x)``; raises :class:`ExtrapolationError` outside the box."""
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim <= 1
    pts = np.atleast_2d(x_arr).reshape(-1, u.grid.d)
    check_inside(u.grid, t, pts)
    pts = np.clip(pts, u.grid.lower, u.grid.upper)
    out = interpolate_field(u.grid, u.values, float(t), pts)
    return float(out[0]) if single else out

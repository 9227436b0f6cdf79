"""Sparse assembly of the monotone second-order operator on a Grid.

``(L u)_i = 1/2 Tr[a D^2 u]_i + sum_k max(b_k, 0) D+_k u - max(-b_k, 0) D-_k u``

with central second differences on the diagonal of ``a`` and the 7-point
monotone splitting for the off-diagonal entries. Ghost nodes outside the box
are eliminated through a ghost rule, applied axis by axis.
"""

from __future__ import annotations

import itertools

import numpy as np
import scipy.sparse as sp

from .grid import Grid


class MonotonicityError(ValueError):
    """The diffusion matrix is not diagonally dominant at some node."""


class LinearGhost:
    """Ghost value ``2 u_0 - u_1``: zero second normal difference."""

    def expand(self, grid: Grid, axis: int, side: int, targets: np.ndarray):
        n = grid.n_x
        m = targets.shape[0]
        if side < 0:
            return [(0, np.full(m, 2.0)), (1, np.full(m, -1.0))]
        return [(n - 1, np.full(m, 2.0)), (n - 2, np.full(m, -1.0))]


class RatioGhost:
    """Ghost value ``rho * u_0`` with a per-boundary-node ratio.

    ``low[k]`` and ``high[k]`` are arrays of grid shape, constant along axis
    ``k``; they are looked up at the ghost's transverse position.
    """

    def __init__(self, low, high):
        self.low = low
        self.high = high

    @classmethod
    def geometric(cls, layer: np.ndarray) -> "RatioGhost":
        """Ratios that continue ``layer`` geometrically past each face."""
        low, high = [], []
        for k in range(layer.ndim):
            a = np.moveaxis(layer, k, 0)
            lo = np.broadcast_to(a[0] / a[1], a.shape)
            hi = np.broadcast_to(a[-1] / a[-2], a.shape)
            low.append(np.moveaxis(lo, 0, k))
            high.append(np.moveaxis(hi, 0, k))
        return cls(low, high)

    def expand(self, grid: Grid, axis: int, side: int, targets: np.ndarray):
        idx = tuple(np.clip(targets[:, j], 0, grid.n_x - 1) for j in range(grid.d))
        if side < 0:
            return [(0, self.low[axis][idx])]
        return [(grid.n_x - 1, self.high[axis][idx])]


def _flat(grid: Grid, targets: np.ndarray) -> np.ndarray:
    return np.ravel_multi_index(tuple(targets.T), grid.shape)


def _resolve(grid: Grid, targets, rows, vals, ghost):
    n = grid.n_x
    for k in range(grid.d):
        tk = targets[:, k]
        outside = (tk < 0) | (tk > n - 1)
        if not np.any(outside):
            continue
        keep = ~outside
        new_t, new_r, new_v = [targets[keep]], [rows[keep]], [vals[keep]]
        for side in (-1, 1):
            sel = tk < 0 if side < 0 else tk > n - 1
            if not np.any(sel):
                continue
            t_sel = targets[sel]
            for pos, weight in ghost.expand(grid, k, side, t_sel):
                t_new = t_sel.copy()
                t_new[:, k] = pos
                new_t.append(t_new)
                new_r.append(rows[sel])
                new_v.append(vals[sel] * weight)
        targets = np.concatenate(new_t)
        rows = np.concatenate(new_r)
        vals = np.concatenate(new_v)
    return rows, _flat(grid, targets), vals


def check_diagonal_dominance(a: np.ndarray, rtol: float = 1e-12):
    """Raise unless ``a_kk >= sum_{l != k} |a_kl|`` at every node."""
    diag = np.einsum("nkk->nk", a)
    off = np.sum(np.abs(a), axis=2) - np.abs(diag)
    bad = diag + rtol * np.maximum(1.0, np.abs(diag)) < off
    if np.any(bad):
        i, k = np.argwhere(bad)[0]
        raise MonotonicityError(
            f"diffusion matrix not diagonally dominant at node {i}, row {k}: "
            f"a_kk={diag[i, k]:.6g} < sum|a_kl|={off[i, k]:.6g}"
        )


def assemble(grid: Grid, a: np.ndarray, b: np.ndarray | None, ghost,
             drift_ghost: bool = True) -> sp.csr_matrix:
    """Operator matrix for diffusion ``a`` (N, d, d) and drift ``b`` (N, d).

    With ``drift_ghost=False`` an upwind drift term whose neighbour lies
    outside the box is dropped instead of being closed by the ghost rule;
    this keeps every off-diagonal entry nonnegative.
    """
    d, h, N = grid.d, grid.h, grid.n_nodes
    idx = np.indices(grid.shape).reshape(d, N).T
    rows0 = np.arange(N)
    center = np.zeros(N)
    terms = []  # (offset, coefficient)

    if d > 1 and np.any(a[:, ~np.eye(d, dtype=bool)] != 0):
        check_diagonal_dominance(a)
        cross = True
    else:
        cross = False

    for k in range(d):
        e = np.zeros(d, dtype=int)
        e[k] = 1
        side = 0.5 * a[:, k, k] / h**2
        if cross:
            side = side - 0.5 * (np.sum(np.abs(a[:, k, :]), axis=1) - np.abs(a[:, k, k])) / h**2
        up = side.copy()
        dn = side.copy()
        center -= 2.0 * side
        if b is not None:
            bp = np.maximum(b[:, k], 0.0) / h
            bm = np.maximum(-b[:, k], 0.0) / h
            if not drift_ghost:
                bp = np.where(idx[:, k] == grid.n_x - 1, 0.0, bp)
                bm = np.where(idx[:, k] == 0, 0.0, bm)
            up += bp
            dn += bm
            center -= bp + bm
        terms.append((e, up))
        terms.append((-e, dn))

    if cross:
        for k, l in itertools.combinations(range(d), 2):
            akl = a[:, k, l]
            w = np.abs(akl) / (2.0 * h**2)
            # axis neighbours already carry -w each; the centre keeps +2w net
            center -= 2.0 * w
            ek = np.zeros(d, dtype=int)
            el = np.zeros(d, dtype=int)
            ek[k] = 1
            el[l] = 1
            pos = np.where(akl > 0, w, 0.0)
            neg = np.where(akl < 0, w, 0.0)
            terms += [(ek + el, pos), (-ek - el, pos), (ek - el, neg), (-ek + el, neg)]

    all_t, all_r, all_v = [idx], [rows0], [center]
    for off, coef in terms:
        nz = coef != 0
        if not np.any(nz):
            continue
        all_t.append(idx[nz] + off)
        all_r.append(rows0[nz])
        all_v.append(coef[nz])
    rows, cols, vals = _resolve(grid, np.concatenate(all_t), np.concatenate(all_r),
                                np.concatenate(all_v), ghost)
    return sp.coo_matrix((vals, (rows, cols)), shape=(N, N)).tocsr()

"""Measured certificates on computed value functions.

Every quantity is a supremum or infimum over finitely many nodes, so it
bounds the continuous statement it mirrors only up to discretisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import ValueFunction, gradient_field

ALL_PAIRS_LIMIT = 20_000
_CHUNK = 4_000_000


class CertificateError(ValueError):
    pass


def sup_gradient(u: ValueFunction, core_fraction: float = 0.6) -> float:
    """``max |Du|`` over core nodes and all time layers."""
    grid = u.grid
    mask = grid.core_mask(core_fraction)
    best = 0.0
    for layer in u.values:
        g = gradient_field(layer, grid.h)
        best = max(best, float(np.max(np.linalg.norm(g[mask], axis=-1))))
    return best


@dataclass(frozen=True)
class PairSampler:
    """Same-time node pairs on the core box.

    Every unordered core pair when a layer holds at most ``ALL_PAIRS_LIMIT``
    nodes; otherwise ``n_pairs`` seeded random pairs plus all axis-neighbour
    pairs.
    """

    n_pairs: int = 10_000
    seed: int = 0
    core_fraction: float = 0.6

    def pairs(self, grid):
        mask = grid.core_mask(self.core_fraction).ravel()
        nodes = np.flatnonzero(mask)
        K = nodes.size
        if K < 2:
            raise CertificateError("core box holds fewer than two nodes")
        if grid.n_nodes <= ALL_PAIRS_LIMIT:
            i, j = np.triu_indices(K, k=1)
            return nodes[i], nodes[j]
        rng = np.random.default_rng(self.seed)
        i = rng.integers(0, K, self.n_pairs)
        j = rng.integers(0, K, self.n_pairs)
        keep = i != j
        I, J = [nodes[i[keep]]], [nodes[j[keep]]]
        full = np.arange(grid.n_nodes).reshape(grid.shape)
        for k in range(grid.d):
            a = np.take(full, np.arange(grid.n_x - 1), axis=k).ravel()
            b = np.take(full, np.arange(1, grid.n_x), axis=k).ravel()
            both = mask[a] & mask[b]
            I.append(a[both])
            J.append(b[both])
        return np.concatenate(I), np.concatenate(J)


def _pair_scan(u: ValueFunction, sampler: PairSampler, reducer):
    grid = u.grid
    I, J = sampler.pairs(grid)
    x = grid.nodes()
    dist = np.linalg.norm(x[I] - x[J], axis=1)
    vals = u.values.reshape(grid.n_t + 1, -1)
    step = max(1, _CHUNK // max(1, vals.shape[0]))
    best = -math.inf
    for s in range(0, I.size, step):
        diff = np.abs(vals[:, I[s:s + step]] - vals[:, J[s:s + step]])
        best = max(best, float(np.max(reducer(diff, dist[s:s + step]))))
    return best


def lipschitz_quotient(u: ValueFunction, n_pairs: int = 10_000, seed: int = 0,
                       core_fraction: float = 0.6) -> float:
    """``sup |u(t,x) - u(t,y)| / |x - y|`` over sampled same-time node pairs."""
    if n_pairs < 1:
        raise CertificateError("n_pairs must be positive")
    sampler = PairSampler(n_pairs, seed, core_fraction)
    return max(0.0, _pair_scan(u, sampler, lambda diff, dist: diff / dist))


def deteriorated_check(u: ValueFunction, K_tilde: float, sampler: PairSampler | None = None) -> float:
    """``M~ = max u(t,x) - u(t,y) - K~ |x - y|`` over sampled pairs with ``x != y``."""
    if not K_tilde >= 0:
        raise CertificateError("K_tilde must be nonnegative")
    sampler = sampler or PairSampler()
    return _pair_scan(u, sampler, lambda diff, dist: diff - K_tilde * dist)


def growth_envelope(u: ValueFunction) -> float:
    """``max |u| / (1 + |x|)`` over every node and layer."""
    r = np.linalg.norm(u.grid.nodes(), axis=1).reshape(u.grid.shape)
    return float(np.max(np.abs(u.values) / (1.0 + r)))


def control_norm_certificate(field_, u: ValueFunction, L_A: float) -> float:
    """``min L_A (1 + |Du|) - |alpha|`` over every node and layer."""
    if not field_.grid.same_as(u.grid):
        raise CertificateError("control field and value function live on different grids")
    margin = math.inf
    for j, layer in enumerate(u.values):
        g = np.linalg.norm(gradient_field(layer, u.grid.h), axis=-1)
        a = np.linalg.norm(field_.controls[j], axis=-1)
        margin = min(margin, float(np.min(L_A * (1.0 + g) - a)))
    return margin


@dataclass(frozen=True)
class CertificateThresholds:
    core_fraction: float = 0.6
    sup_grad_max: float = math.inf
    lipschitz_max: float = math.inf
    growth_max: float = math.inf
    K_tilde: float | None = None  # None: use the measured Lipschitz quotient
    M_tilde_max: float | None = None  # None: nodal roundoff, 1e-9 x value scale
    consistency_rel: float = 0.05
    n_pairs: int = 10_000
    seed: int = 0


@dataclass
class CertificateReport:
    sup_grad: float
    lipschitz_quotient: float
    growth_L: float
    deteriorated_pair: tuple
    control_margin: float | None
    core_fraction: float
    rows: list = field(default_factory=list)  # (certificate, value, threshold, passed)

    @property
    def passed(self) -> bool:
        return all(r[3] for r in self.rows)

    @property
    def verdicts(self) -> dict:
        return {r[0]: r[3] for r in self.rows}


def certify(u: ValueFunction, thresholds: CertificateThresholds = CertificateThresholds(),
            field_=None, L_A: float | None = None) -> CertificateReport:
    th = thresholds
    K = sup_gradient(u, th.core_fraction)
    sampler = PairSampler(th.n_pairs, th.seed, th.core_fraction)
    lq = lipschitz_quotient(u, th.n_pairs, th.seed, th.core_fraction)
    L = growth_envelope(u)
    K_t = lq if th.K_tilde is None else th.K_tilde
    M_t = deteriorated_check(u, K_t, sampler)
    M_max = 1e-9 * max(1.0, u.sup_norm()) if th.M_tilde_max is None else th.M_tilde_max
    rows = [
        ("sup_grad", K, th.sup_grad_max, K <= th.sup_grad_max),
        ("lipschitz_quotient", lq, th.lipschitz_max, lq <= th.lipschitz_max),
        ("gradient_consistency", K, (1 + th.consistency_rel) * lq + 1e-9,
         K <= (1 + th.consistency_rel) * lq + 1e-9),
        ("growth_L", L, th.growth_max, L <= th.growth_max),
        ("deteriorated_M", M_t, M_max, M_t <= M_max),
    ]
    margin = None
    if field_ is not None and L_A is not None:
        margin = control_norm_certificate(field_, u, L_A)
        rows.append(("control_margin", margin, 0.0 - field_.resolution, margin >= -field_.resolution - 1e-12))
    rows = [(n, float(v), float(t), bool(ok)) for n, v, t, ok in rows]
    return CertificateReport(K, lq, L, (float(K_t), float(M_t)), margin, th.core_fraction, rows)

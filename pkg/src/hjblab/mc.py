"""Monte Carlo estimate of the control cost under a feedback law.

Euler-Maruyama on ``dX = b(s, X, a) ds + sigma(s, X) dW`` with running cost
``int e^{c(s - t0)} f(s, X, a) ds`` and terminal cost ``g(X_T)``, the
latter undiscounted.

Each path owns a Philox stream keyed by ``(path index, seed)``; normals come
from the Box-Muller transform of its raw 64-bit words. Per-path costs are
written into one array and reduced once, so the estimate does not depend on
chunking or on the number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import ValueFunction, check_inside, interpolate, interpolate_field
from .problem import HJBProblem
from .solver import ControlField

_MASK64 = (1 << 64) - 1
_CHUNK = 4096


class SimulationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    n_paths: int
    dt_sim: float
    seed: int = 0
    antithetic: bool = False
    workers: int = 1

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ValueError("n_paths must be a positive integer")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even number of paths")
        if not (math.isfinite(self.dt_sim) and self.dt_sim > 0):
            raise ValueError("dt_sim must be positive")
        if int(self.workers) != self.workers or self.workers < 1:
            raise ValueError("workers must be a positive integer")

    def check_clock(self, dt_grid: float):
        if self.dt_sim > dt_grid * (1 + 1e-12):
            raise ValueError(f"dt_sim={self.dt_sim} is coarser than the grid step {dt_grid}")


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n_paths: int
    t: float
    x: tuple
    exit_fraction: float = 0.0


def _box_muller(raw: np.ndarray) -> np.ndarray:
    """Normals from raw 64-bit words, pairwise along the last axis."""
    u = (raw >> np.uint64(11)).astype(float) * 2.0**-53
    u1 = 1.0 - u[..., 0::2]  # (0, 1]
    u2 = u[..., 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(raw.shape)
    z[..., 0::2] = r * np.cos(2.0 * np.pi * u2)
    z[..., 1::2] = r * np.sin(2.0 * np.pi * u2)
    return z


def _raw_words(path_index: int, seed: int, n_words: int) -> np.ndarray:
    bg = np.random.Philox(key=[int(path_index) & _MASK64, int(seed) & _MASK64])
    return bg.random_raw(n_words)


def path_normals(path_index: int, seed: int, n: int) -> np.ndarray:
    """``n`` standard normals from the stream of one path."""
    if n == 0:
        return np.empty(0)
    m = (n + 1) // 2
    return _box_muller(_raw_words(path_index, seed, 2 * m))[:n]


def _noise_block(streams: np.ndarray, seed: int, n_steps: int, d: int) -> np.ndarray:
    """Normals of shape (n_steps, len(streams), d); row ``i`` equals ``path_normals(streams[i])``."""
    n = n_steps * d
    m = (n + 1) // 2
    raw = np.empty((len(streams), 2 * m), dtype=np.uint64)
    for i, s in enumerate(streams):
        raw[i] = _raw_words(s, seed, 2 * m)
    z = _box_muller(raw)[:, :n]
    return z.reshape(len(streams), n_steps, d).transpose(1, 0, 2)


def _as_policy(p: HJBProblem, policy):
    """Normalise a policy to ``fn(t, X) -> (P, d)``; the grid is returned for fields."""
    if isinstance(policy, ControlField):
        grid = policy.grid

        def fn(t, X):
            Xc = np.clip(X, grid.lower, grid.upper)
            return interpolate_field(grid, policy.controls, min(max(t, 0.0), grid.T), Xc)

        return fn, grid
    if callable(policy):
        return policy, None
    a = np.broadcast_to(np.asarray(policy, dtype=float), (p.d,)).copy()
    return (lambda t, X: np.broadcast_to(a, X.shape)), None


def _simulate_block(p, fn, grid, t0, x0, n_steps, ds, streams, seed, signs, first_path):
    P = len(streams) * len(signs)
    z = _noise_block(streams, seed, n_steps, p.d)
    if len(signs) == 2:
        z = np.stack([z, -z], axis=2).reshape(n_steps, P, p.d)
    X = np.tile(np.asarray(x0, dtype=float), (P, 1))
    cost = np.zeros(P)
    exited = np.zeros(P, dtype=bool)
    sq = math.sqrt(ds)
    for k in range(n_steps):
        s = t0 + k * ds
        if grid is not None:
            exited |= np.any((X < grid.lower) | (X > grid.upper), axis=1)
        a = np.asarray(fn(s, X), dtype=float)
        cost += math.exp(p.c * (s - t0)) * p.f(s, X, a) * ds
        sig = p.sigma(s, X)
        X = X + p.drift(s, X, a) * ds + sq * np.einsum("nij,nj->ni", sig, z[k])
        bad = ~np.all(np.isfinite(X), axis=1) | ~np.isfinite(cost)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise SimulationError(f"nonfinite state on path {first_path + i} at step {k + 1}")
    if grid is not None:
        exited |= np.any((X < grid.lower) | (X > grid.upper), axis=1)
    cost += p.terminal(X)
    return cost, exited


def simulate_cost(p: HJBProblem, policy, t0: float, x0, cfg: SimulationConfig) -> CostEstimate:
    """Estimate ``J(t0, x0; policy)``.

    ``policy`` is a :class:`ControlField`, a constant control vector or a
    callable ``(t, X) -> (P, d)``. Paths leaving the field's box keep the
    control of the nearest boundary point; their fraction is reported.
    """
    x0 = np.asarray(x0, dtype=float).reshape(p.d)
    if not 0.0 <= t0 <= p.T:
        raise ValueError(f"start time {t0} outside [0, {p.T}]")
    fn, grid = _as_policy(p, policy)
    if grid is not None:
        check_inside(grid, t0, x0[None, :])
        cfg.check_clock(grid.dt)
    n_steps = int(round((p.T - t0) / cfg.dt_sim))
    if t0 < p.T:
        n_steps = max(n_steps, 1)
    ds = (p.T - t0) / n_steps if n_steps else 0.0

    signs = (1.0, -1.0) if cfg.antithetic else (1.0,)
    n_streams = cfg.n_paths // len(signs)
    per_chunk = max(1, _CHUNK // len(signs))
    blocks = [np.arange(s, min(s + per_chunk, n_streams)) for s in range(0, n_streams, per_chunk)]
    costs = np.empty(cfg.n_paths)
    exits = np.empty(cfg.n_paths, dtype=bool)

    def run(streams):
        lo = streams[0] * len(signs)
        c, e = _simulate_block(p, fn, grid, t0, x0, n_steps, ds, streams, cfg.seed, signs, lo)
        costs[lo:lo + c.size] = c
        exits[lo:lo + c.size] = e

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            list(pool.map(run, blocks))
    else:
        for b in blocks:
            run(b)

    if cfg.antithetic:
        samples = 0.5 * (costs[0::2] + costs[1::2])
    else:
        samples = costs
    mean = float(np.mean(samples))
    se = float(np.std(samples, ddof=1) / math.sqrt(samples.size)) if samples.size > 1 else 0.0
    return CostEstimate(mean, se, cfg.n_paths, float(t0), tuple(float(v) for v in x0),
                        float(np.mean(exits)) if grid is not None else 0.0)


@dataclass(frozen=True)
class PointCheck:
    t: float
    x: tuple
    u_pde: float
    estimate: CostEstimate
    allowance: float

    @property
    def gap(self) -> float:
        return abs(self.estimate.mean - self.u_pde)

    @property
    def band(self) -> float:
        return 3.0 * self.estimate.stderr + self.allowance

    @property
    def passed(self) -> bool:
        return self.gap <= self.band


@dataclass(frozen=True)
class InfimumCheck:
    t: float
    x: tuple
    baseline: tuple
    feedback: CostEstimate
    other: CostEstimate

    @property
    def combined_stderr(self) -> float:
        return math.hypot(self.feedback.stderr, self.other.stderr)

    @property
    def passed(self) -> bool:
        return self.feedback.mean <= self.other.mean + 3.0 * self.combined_stderr


@dataclass
class VerificationReport:
    points: list = field(default_factory=list)
    infimum: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.points) and all(c.passed for c in self.infimum)

    def rows(self):
        """(t, x..., u_pde, v_mc, stderr, verdict) per point."""
        return [(c.t, *c.x, c.u_pde, c.estimate.mean, c.estimate.stderr,
                 "pass" if c.passed else "fail") for c in self.points]


def verify_value(p: HJBProblem, u: ValueFunction, field_: ControlField,
                 points: Sequence, cfg: SimulationConfig, allowance: float,
                 baselines: Sequence = ()) -> VerificationReport:
    """Compare PDE values with simulated costs under the synthesized feedback."""
    if not allowance >= 0:
        raise ValueError("allowance must be nonnegative")
    rep = VerificationReport()
    for t, x in points:
        x = np.asarray(x, dtype=float).reshape(p.d)
        est = simulate_cost(p, field_, t, x, cfg)
        xt = tuple(float(v) for v in x)
        rep.points.append(PointCheck(float(t), xt, interpolate(u, t, x), est, allowance))
        for b in baselines:
            other = simulate_cost(p, np.asarray(b, dtype=float), t, x, cfg)
            rep.infimum.append(InfimumCheck(float(t), xt,
                                            tuple(np.broadcast_to(b, (p.d,)).tolist()), est, other))
    return rep

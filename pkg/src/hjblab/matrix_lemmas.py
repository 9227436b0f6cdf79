"""Two symmetric-matrix inequalities used in the doubling-of-variables argument.

* trace bound: ``A >= m Id`` and ``B <= M Id`` give
  ``Tr[AB] <= m Tr[B] + M (Tr[A] - d m)``.
* doubling bound: if ``diag(X, Y) <= C [[A, -A], [-A, A]] + m Id`` then
  ``lambda_max(X - Y) <= sqrt(2) (2m + 2C + lambda_max(X + Y))``, as stated.
  The argument behind it (a quadratic in ``t`` applied to ``(t xi, xi)``)
  delivers ``xi'(X - Y)xi <= sqrt(2) (2m + 2C xi'A xi - xi'(X + Y)xi)``;
  :func:`doubling_matrix_bound_corrected` checks that form.

Eigenvalues come from a cyclic Jacobi iteration vectorised over a batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

PSD_TOL = 1e-10
HOLD_TOL = 1e-10
JACOBI_TOL = 1e-12


class PreconditionError(ValueError):
    pass


class HypothesisError(PreconditionError):
    def __init__(self, message, min_eigenvalue):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


# -- storage -----------------------------------------------------------------

class SymmetricMatrix:
    """Symmetric ``d x d`` matrix stored once per unordered index pair."""

    __slots__ = ("d", "packed")

    def __init__(self, d: int, packed):
        packed = np.asarray(packed, dtype=float)
        if packed.shape != (d * (d + 1) // 2,):
            raise ValueError(f"packed storage for d={d} needs {d * (d + 1) // 2} entries")
        self.d = int(d)
        self.packed = packed

    @classmethod
    def from_dense(cls, a) -> "SymmetricMatrix":
        a = np.asarray(a, dtype=float)
        a = np.atleast_2d(a)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        if not np.array_equal(a, a.T):
            i, j = np.argwhere(a != a.T)[0]
            raise ValueError(f"matrix not exactly symmetric at ({i}, {j})")
        return cls(a.shape[0], a[np.triu_indices(a.shape[0])])

    @classmethod
    def identity(cls, d: int, scale: float = 1.0) -> "SymmetricMatrix":
        return cls.from_dense(scale * np.eye(d))

    def dense(self) -> np.ndarray:
        a = np.zeros((self.d, self.d))
        a[np.triu_indices(self.d)] = self.packed
        return a + np.triu(a, 1).T

    def __array__(self, dtype=None, copy=None):
        return self.dense() if dtype is None else self.dense().astype(dtype)

    def __repr__(self):
        return f"SymmetricMatrix(d={self.d}, packed={self.packed.tolist()})"


def _dense(a) -> np.ndarray:
    return a.dense() if isinstance(a, SymmetricMatrix) else np.atleast_2d(np.asarray(a, dtype=float))


# -- eigenvalues -------------------------------------------------------------

def _round_robin(n: int) -> list:
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        pairs = [(players[i], players[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        rounds.append((np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigvalsh(a: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = 60) -> np.ndarray:
    """Ascending eigenvalues of symmetric matrices, shape (..., n, n) -> (..., n).

    Cyclic Jacobi rotations, run on the whole batch at once until every
    off-diagonal Frobenius norm is at most ``tol * ||a||_F``. Each sweep is
    split into rounds of disjoint pairs, whose rotations commute and are
    applied together.
    """
    a = np.array(a, dtype=float)
    lead = a.shape[:-2]
    n = a.shape[-1]
    A = a.reshape(-1, n, n)
    if n == 1 or A.shape[0] == 0:
        return np.sort(np.einsum("bii->bi", A), axis=1).reshape(lead + (n,))
    target = tol * np.linalg.norm(A, axis=(1, 2))
    iu = np.triu_indices(n, 1)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(A[:, iu[0], iu[1]] ** 2, axis=1))
        if np.all(off <= target):
            break
        for P, Q in rounds:
            apq = A[:, P, Q]
            if not np.any(apq):
                continue
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                theta = (A[:, Q, Q] - A[:, P, P]) / (2.0 * apq)
                t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where((apq != 0.0) & np.isfinite(t), t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            cp, cq = A[:, :, P], A[:, :, Q]
            A[:, :, P] = c[:, None, :] * cp - s[:, None, :] * cq
            A[:, :, Q] = s[:, None, :] * cp + c[:, None, :] * cq
            rp, rq = A[:, P, :], A[:, Q, :]
            A[:, P, :] = c[:, :, None] * rp - s[:, :, None] * rq
            A[:, Q, :] = s[:, :, None] * rp + c[:, :, None] * rq
            A[:, P, Q] = 0.0
            A[:, Q, P] = 0.0
    else:
        raise ArithmeticError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    return np.sort(np.einsum("bii->bi", A), axis=1).reshape(lead + (n,))


def extreme_eigenvalues(a) -> tuple:
    w = jacobi_eigvalsh(_dense(a))
    return float(w[0]), float(w[-1])


# -- the trace bound ---------------------------------------------------------

@dataclass(frozen=True)
class BoundResult:
    lhs: float
    rhs: float
    holds: bool

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs != 0 else math.nan


def trace_product_bound_batch(A, B, m, M, check: bool = True):
    """Vectorised trace bound over (n, d, d) stacks; returns (lhs, rhs, holds)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, d = A.shape[0], A.shape[-1]
    m = np.broadcast_to(np.asarray(m, dtype=float), (n,))
    M = np.broadcast_to(np.asarray(M, dtype=float), (n,))
    if check:
        scale = np.maximum(1.0, np.maximum(np.max(np.abs(A), axis=(1, 2)), np.max(np.abs(B), axis=(1, 2))))
        lo = jacobi_eigvalsh(A)[:, 0]
        hi = jacobi_eigvalsh(B)[:, -1]
        bad_a = lo < m - PSD_TOL * scale
        bad_b = hi > M + PSD_TOL * scale
        if np.any(bad_a):
            i = int(np.argmax(bad_a))
            raise PreconditionError(f"A >= m Id fails at instance {i}: lambda_min(A)={lo[i]:.17g} < m={m[i]:.17g}")
        if np.any(bad_b):
            i = int(np.argmax(bad_b))
            raise PreconditionError(f"B <= M Id fails at instance {i}: lambda_max(B)={hi[i]:.17g} > M={M[i]:.17g}")
    lhs = np.einsum("bij,bji->b", A, B)
    rhs = m * np.einsum("bii->b", B) + M * (np.einsum("bii->b", A) - d * m)
    tol = HOLD_TOL * np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    return lhs, rhs, lhs <= rhs + tol


def trace_product_bound(A, B, m: float, M: float) -> BoundResult:
    """``Tr[AB] <= m Tr[B] + M (Tr[A] - d m)`` for ``A >= m Id``, ``B <= M Id``."""
    if not (m >= 0 and M >= 0):
        raise PreconditionError(f"m and M must be nonnegative, got m={m}, M={M}")
    a, b = _dense(A), _dense(B)
    if a.shape != b.shape:
        raise PreconditionError(f"A is {a.shape} but B is {b.shape}")
    lhs, rhs, ok = trace_product_bound_batch(a[None], b[None], m, M)
    return BoundResult(float(lhs[0]), float(rhs[0]), bool(ok[0]))


# -- the doubling bound ------------------------------------------------------

def hypothesis_block(A, X, Y, C, m) -> np.ndarray:
    """``[[C A + m Id - X, -C A], [-C A, C A + m Id - Y]]``; accepts (..., d, d) stacks."""
    A, X, Y = (np.asarray(v, dtype=float) for v in (A, X, Y))
    C = np.asarray(C, dtype=float)[..., None, None]
    m = np.asarray(m, dtype=float)[..., None, None]
    I = np.eye(A.shape[-1])
    CA = C * A
    top = np.concatenate([CA + m * I - X, -CA], axis=-1)
    bot = np.concatenate([-CA, CA + m * I - Y], axis=-1)
    return np.concatenate([top, bot], axis=-2)


def hypothesis_margin(A, X, Y, C, m) -> np.ndarray:
    """Smallest eigenvalue of the hypothesis block."""
    return jacobi_eigvalsh(hypothesis_block(A, X, Y, C, m))[..., 0]


def _check_hypothesis(A, X, Y, C, m):
    n = A.shape[0]
    C = np.broadcast_to(np.asarray(C, dtype=float), (n,))
    m = np.broadcast_to(np.asarray(m, dtype=float), (n,))
    if np.any(~(C > 0)) or np.any(~(m > 0)):
        raise PreconditionError("C and m must be positive")
    block = hypothesis_block(A, X, Y, C, m)
    lo = jacobi_eigvalsh(block)[:, 0]
    scale = np.maximum(1.0, np.max(np.abs(block), axis=(1, 2)))
    bad = lo < -PSD_TOL * scale
    if np.any(bad):
        i = int(np.argmax(bad))
        raise HypothesisError(
            f"block hypothesis fails at instance {i}: smallest eigenvalue {lo[i]:.17g}", float(lo[i])
        )
    return C, m


def doubling_matrix_bound_batch(A, X, Y, C, m, check: bool = True):
    """Stated doubling bound over (n, d, d) stacks; returns (lhs, rhs, holds)."""
    A, X, Y = (np.asarray(v, dtype=float) for v in (A, X, Y))
    n = A.shape[0]
    if check:
        C, m = _check_hypothesis(A, X, Y, C, m)
    else:
        C = np.broadcast_to(np.asarray(C, dtype=float), (n,))
        m = np.broadcast_to(np.asarray(m, dtype=float), (n,))
    lhs = jacobi_eigvalsh(X - Y)[:, -1]
    rhs = math.sqrt(2.0) * (2.0 * m + 2.0 * C + jacobi_eigvalsh(X + Y)[:, -1])
    tol = HOLD_TOL * np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    return lhs, rhs, lhs <= rhs + tol


def doubling_matrix_bound_corrected_batch(A, X, Y, C, m, check: bool = True):
    """``lambda_max(X - Y) <= sqrt(2) (2m + 2C lambda_max(A) - lambda_min(X + Y))``."""
    A, X, Y = (np.asarray(v, dtype=float) for v in (A, X, Y))
    n = A.shape[0]
    if check:
        C, m = _check_hypothesis(A, X, Y, C, m)
    else:
        C = np.broadcast_to(np.asarray(C, dtype=float), (n,))
        m = np.broadcast_to(np.asarray(m, dtype=float), (n,))
    lhs = jacobi_eigvalsh(X - Y)[:, -1]
    rhs = math.sqrt(2.0) * (2.0 * m + 2.0 * C * jacobi_eigvalsh(A)[:, -1] - jacobi_eigvalsh(X + Y)[:, 0])
    tol = HOLD_TOL * np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    return lhs, rhs, lhs <= rhs + tol


def _single(batch_fn, A, X, Y, C, m) -> BoundResult:
    a, x, y = _dense(A), _dense(X), _dense(Y)
    if not a.shape == x.shape == y.shape:
        raise PreconditionError(f"shape mismatch: A {a.shape}, X {x.shape}, Y {y.shape}")
    lhs, rhs, ok = batch_fn(a[None], x[None], y[None], C, m)
    return BoundResult(float(lhs[0]), float(rhs[0]), bool(ok[0]))


def doubling_matrix_bound(A, X, Y, C: float, m: float) -> BoundResult:
    """The doubling bound in its stated form."""
    return _single(doubling_matrix_bound_batch, A, X, Y, C, m)


def doubling_matrix_bound_corrected(A, X, Y, C: float, m: float) -> BoundResult:
    """The doubling bound that the quadratic-in-``t`` argument delivers."""
    return _single(doubling_matrix_bound_corrected_batch, A, X, Y, C, m)


# -- generators --------------------------------------------------------------

@dataclass(frozen=True)
class HypothesisInstance:
    A: SymmetricMatrix
    X: SymmetricMatrix
    Y: SymmetricMatrix
    C: float
    m: float

    def __iter__(self):
        return iter((self.A, self.X, self.Y, self.C, self.m))


def _sym(rng, n, d):
    G = rng.standard_normal((n, d, d))
    return 0.5 * (G + np.swapaxes(G, 1, 2))


def _psd(rng, n, d):
    G = rng.standard_normal((n, d, d))
    return G @ np.swapaxes(G, 1, 2) / d


def generate_hypothesis_arrays(d: int, n: int, seed: int, iters: int = 24):
    """Arrays ``(A, X, Y, C, m)`` satisfying the block hypothesis.

    ``X0, Y0`` are scaled by the largest ``s`` in ``[0, 1]`` found by bisection
    against the smallest block eigenvalue; ``s = 0`` is always admissible since
    ``C [[A, -A], [-A, A]] >= 0`` and ``m > 0``.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    rng = np.random.default_rng([seed, d])
    A = _psd(rng, n, d)
    X0 = 2.0 * _sym(rng, n, d)
    Y0 = 2.0 * _sym(rng, n, d)
    C = rng.uniform(0.1, 2.0, n)
    m = rng.uniform(0.1, 2.0, n)
    if n == 0:
        return A, X0, Y0, C, m
    lo = np.zeros(n)
    hi = np.ones(n)
    ok_full = hypothesis_margin(A, X0, Y0, C, m) >= 0
    lo[ok_full] = 1.0
    todo = ~ok_full
    for _ in range(iters):
        if not np.any(todo):
            break
        mid = 0.5 * (lo + hi)
        s = mid[todo][:, None, None]
        ok = hypothesis_margin(A[todo], s * X0[todo], s * Y0[todo], C[todo], m[todo]) >= 0
        idx = np.flatnonzero(todo)
        lo[idx[ok]] = mid[idx[ok]]
        hi[idx[~ok]] = mid[idx[~ok]]
    s = lo[:, None, None]
    X = s * X0
    Y = s * Y0
    # exact symmetry after scaling
    X = 0.5 * (X + np.swapaxes(X, 1, 2))
    Y = 0.5 * (Y + np.swapaxes(Y, 1, 2))
    return A, X, Y, C, m


def generate_hypothesis_instances(d: int, n: int, seed: int) -> list:
    """Tuples ``(A, X, Y, C, m)`` satisfying the block hypothesis by construction."""
    A, X, Y, C, m = generate_hypothesis_arrays(d, n, seed)
    return [HypothesisInstance(SymmetricMatrix.from_dense(A[i]), SymmetricMatrix.from_dense(X[i]),
                               SymmetricMatrix.from_dense(Y[i]), float(C[i]), float(m[i]))
            for i in range(n)]


def generate_trace_arrays(d: int, n: int, seed: int):
    """``A = m Id + P``, ``B = M Id - Q`` with ``P, Q`` positive semidefinite."""
    rng = np.random.default_rng([seed, d, 1])
    m = rng.uniform(0.0, 2.0, n)
    M = rng.uniform(0.0, 2.0, n)
    I = np.eye(d)
    A = m[:, None, None] * I + _psd(rng, n, d)
    B = M[:, None, None] * I - _psd(rng, n, d)
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    B = 0.5 * (B + np.swapaxes(B, 1, 2))
    return A, B, m, M


def random_orthogonal(d: int, rng) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


# -- property suites ---------------------------------------------------------

@dataclass(frozen=True)
class SuiteResult:
    name: str
    n_instances: int
    violations: int
    max_ratio: float
    worst: tuple  # (d, index, lhs, rhs)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _summarise(name, per_d):
    total = sum(r[1].size for r in per_d)
    viol = 0
    max_ratio = -math.inf
    worst = None
    worst_excess = -math.inf
    for d, lhs, rhs, ok in per_d:
        viol += int(np.sum(~ok))
        with np.errstate(divide="ignore", invalid="ignore"):
            pos = rhs > 0
            if np.any(pos):
                max_ratio = max(max_ratio, float(np.max(lhs[pos] / rhs[pos])))
        excess = lhs - rhs
        if excess.size:
            i = int(np.argmax(excess))
            if excess[i] > worst_excess:
                worst_excess = excess[i]
                worst = (d, i, float(lhs[i]), float(rhs[i]))
    return SuiteResult(name, total, viol, max_ratio, worst)


def trace_suite(n: int = 10_000, d_max: int = 8, seed: int = 0) -> SuiteResult:
    dims = range(1, d_max + 1)
    counts = np.full(d_max, n // d_max)
    counts[: n % d_max] += 1
    out = []
    for d, k in zip(dims, counts):
        A, B, m, M = generate_trace_arrays(d, int(k), seed)
        out.append((d,) + trace_product_bound_batch(A, B, m, M))
    return _summarise("trace_product_bound", out)


def doubling_suite(n: int = 10_000, d_max: int = 6, seed: int = 0) -> tuple:
    """(stated, corrected) results on the same generated instances."""
    counts = np.full(d_max, n // d_max)
    counts[: n % d_max] += 1
    stated, corrected = [], []
    for d, k in zip(range(1, d_max + 1), counts):
        A, X, Y, C, m = generate_hypothesis_arrays(d, int(k), seed)
        stated.append((d,) + doubling_matrix_bound_batch(A, X, Y, C, m))
        corrected.append((d,) + doubling_matrix_bound_corrected_batch(A, X, Y, C, m, check=False))
    return (_summarise("doubling_matrix_bound", stated),
            _summarise("doubling_matrix_bound_corrected", corrected))


# -- audit dump --------------------------------------------------------------

def dump_instances(path, instances) -> int:
    """Write hypothesis instances as CSV (packed upper triangles, row-major)."""
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "d", "C", "m", "A", "X", "Y"])
        for i, (A, X, Y, C, m) in enumerate(instances):
            pack = lambda s: " ".join(f"{v:.17g}" for v in s.packed)
            w.writerow([i, A.d, f"{C:.17g}", f"{m:.17g}", pack(A), pack(X), pack(Y)])
            rows += 1
    return rows

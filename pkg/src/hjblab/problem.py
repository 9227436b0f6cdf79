"""HJB problem instances, built-in coefficient families and assumption audits.

Coefficient callables are vectorised over sample points:

* ``b1(t, x, alpha) -> (N, d)`` with ``x``, ``alpha`` of shape ``(N, d)``
* ``b2(t, x) -> (N, d)``
* ``sigma(t, x) -> (N, d, d)``
* ``f1(t, x, alpha) -> (N,)``, ``f2(t, x) -> (N,)``, ``g(x) -> (N,)``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

QUADRATIC = "quadratic"
CUSTOM = "custom"
FAMILIES = (QUADRATIC, CUSTOM)

SIGMA_MODES = ("constant", "affine", "sqrt")
SCALAR_MODES = ("affine", "abs", "clamped")
TIME_PROFILES = ("constant", "ramp", "reverse_ramp")


class ProblemError(ValueError):
    pass


class CoefficientError(ArithmeticError):
    """A coefficient returned a nonfinite value."""

    def __init__(self, name: str, t, x, alpha=None):
        where = f"t={t}, x={np.asarray(x).tolist()}"
        if alpha is not None:
            where += f", alpha={np.asarray(alpha).tolist()}"
        super().__init__(f"coefficient {name} is not finite at {where}")
        self.name = name


def _finite(value, what: str):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ProblemError(f"{what} must be finite, got {value!r}")
    return arr


# -- regularity constants ----------------------------------------------------

@dataclass(frozen=True)
class RegularityConstants:
    L_b: float
    L_f1: float
    c_f1: float
    c_f1_prime: float
    C_f1: float
    C_f1_prime: float
    L_f2: Callable[[float], float]
    L_f2_integral: float
    L_sigma: float
    L_g: float
    eta_sigma: float
    L_A: float

    def __post_init__(self):
        for name in ("L_b", "L_f1", "c_f1", "c_f1_prime", "C_f1", "C_f1_prime",
                     "L_f2_integral", "L_sigma", "L_g", "L_A"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ProblemError(f"{name} must be finite and nonnegative, got {v}")
        if not (np.isfinite(self.eta_sigma) and self.eta_sigma > 0):
            raise ProblemError(f"eta_sigma must be positive, got {self.eta_sigma}")
        if self.c_f1 > self.C_f1:
            raise ProblemError(f"c_f1={self.c_f1} exceeds C_f1={self.C_f1}")

    def check_integral(self, T: float, rtol: float = 1e-8):
        value, _ = integrate.quad(lambda s: float(self.L_f2(s)), 0.0, T, limit=200)
        if abs(value - self.L_f2_integral) > rtol * max(1.0, abs(value)):
            raise ProblemError(
                f"L_f2 integral {self.L_f2_integral} disagrees with quadrature {value}"
            )

    def replace(self, **changes) -> "RegularityConstants":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if "L_f2" in changes and "L_f2_integral" not in changes:
            raise ProblemError("overriding L_f2 requires L_f2_integral")
        kw.update(changes)
        return RegularityConstants(**kw)


def constant_profile(value: float) -> Callable[[float], float]:
    return lambda t: value


# -- coefficient specs -------------------------------------------------------

def _clip(x, rho):
    return x if rho is None else np.clip(x, -rho, rho)


@dataclass(frozen=True)
class AffineDrift:
    """``b2(x) = matrix @ clip(x, -clamp, clamp) + offset``."""

    matrix: np.ndarray
    offset: np.ndarray
    clamp: Optional[float] = None

    def __call__(self, t, x):
        return _clip(x, self.clamp) @ self.matrix.T + self.offset

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.matrix, 2))

    @property
    def growth(self) -> float:
        return max(self.lipschitz, float(np.linalg.norm(self.offset)))


@dataclass(frozen=True)
class IsotropicSigma:
    """``sigma(t, x) = s(x) Id`` with a scalar profile ``s``.

    * ``constant``: ``s = scale``
    * ``affine``: ``s = scale + slope * clip(x_1, -clamp, clamp)``
    * ``sqrt``: ``s = scale * sqrt(1 + min(|x|, clamp))``
    """

    scale: float
    mode: str = "constant"
    slope: float = 0.0
    clamp: Optional[float] = None

    def __post_init__(self):
        if self.mode not in SIGMA_MODES:
            raise ProblemError(f"unknown sigma mode {self.mode!r}")
        if self.mode != "constant" and self.clamp is None:
            raise ProblemError(f"sigma mode {self.mode!r} needs a clamp radius")
        if self.clamp is not None and not self.clamp > 0:
            raise ProblemError("sigma clamp radius must be positive")
        if not self.floor > 0:
            raise ProblemError(f"sigma ellipticity floor {self.floor} must be positive")

    def scalar(self, t, x):
        n = x.shape[0]
        if self.mode == "constant":
            return np.full(n, float(self.scale))
        if self.mode == "affine":
            return self.scale + self.slope * np.clip(x[:, 0], -self.clamp, self.clamp)
        r = np.minimum(np.linalg.norm(x, axis=1), self.clamp)
        return self.scale * np.sqrt(1.0 + r)

    def __call__(self, t, x):
        d = x.shape[1]
        return self.scalar(t, x)[:, None, None] * np.eye(d)

    @property
    def floor(self) -> float:
        if self.mode == "affine":
            return self.scale - abs(self.slope) * self.clamp
        return self.scale

    @property
    def ceiling(self) -> float:
        if self.mode == "affine":
            return self.scale + abs(self.slope) * self.clamp
        if self.mode == "sqrt":
            return self.scale * math.sqrt(1.0 + self.clamp)
        return self.scale

    @property
    def lipschitz(self) -> float:
        return {"constant": 0.0, "affine": abs(self.slope), "sqrt": 0.5 * self.scale}[self.mode]


@dataclass(frozen=True)
class ScalarField:
    """``phi(t, x) = theta(t) * (offset + sum_k slope_k psi(x_k))``.

    ``psi`` is the identity, ``abs`` or a clip to ``[-clamp, clamp]``;
    ``theta`` is a time profile with unit mean over ``[0, T]``.
    """

    slope: np.ndarray
    offset: float = 0.0
    mode: str = "affine"
    clamp: Optional[float] = None
    profile: str = "constant"
    T: float = 1.0

    def __post_init__(self):
        if self.mode not in SCALAR_MODES:
            raise ProblemError(f"unknown scalar mode {self.mode!r}")
        if self.profile not in TIME_PROFILES:
            raise ProblemError(f"unknown time profile {self.profile!r}")
        if self.mode == "clamped" and not (self.clamp is not None and self.clamp > 0):
            raise ProblemError("clamped scalar field needs a positive clamp radius")

    def theta(self, t: float) -> float:
        if self.profile == "ramp":
            return 2.0 * t / self.T
        if self.profile == "reverse_ramp":
            return 2.0 * (self.T - t) / self.T
        return 1.0

    def spatial(self, x):
        if self.mode == "abs":
            psi = np.abs(x)
        elif self.mode == "clamped":
            psi = np.clip(x, -self.clamp, self.clamp)
        else:
            psi = x
        return self.offset + psi @ self.slope

    def __call__(self, t, x):
        return self.theta(t) * self.spatial(x)

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.slope))

    @property
    def growth(self) -> float:
        return max(self.lipschitz, abs(self.offset))

    @property
    def is_zero(self) -> bool:
        return self.offset == 0 and not np.any(self.slope)


# -- the problem -------------------------------------------------------------

@dataclass(frozen=True)
class HJBProblem:
    d: int
    T: float
    c: float
    b1: Callable
    b2: Callable
    sigma: Callable
    f1: Callable
    f2: Callable
    g: Callable
    constants: RegularityConstants
    control_radius: Optional[float] = None  # None: the full space
    family: str = CUSTOM
    specs: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ProblemError(f"dimension must be a positive integer, got {self.d}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise ProblemError(f"horizon must be positive, got {self.T}")
        if not np.isfinite(self.c):
            raise ProblemError("discount must be finite")
        if self.family not in FAMILIES:
            raise ProblemError(f"unknown family {self.family!r}")
        if self.control_radius is not None and not self.control_radius > 0:
            raise ProblemError("control ball radius must be positive")
        self.constants.check_integral(self.T)

    @property
    def is_quadratic(self) -> bool:
        return self.family == QUADRATIC

    def f(self, t, x, alpha):
        return self.f1(t, x, alpha) + self.f2(t, x)

    def drift(self, t, x, alpha):
        return self.b1(t, x, alpha) + self.b2(t, x)

    def diffusion(self, t, x):
        s = self.sigma(t, x)
        return s @ np.swapaxes(s, -1, -2)

    def effective_radius(self, R: float) -> float:
        if self.control_radius is None:
            return float(R)
        return float(min(R, self.control_radius))

    def terminal(self, x) -> np.ndarray:
        out = np.asarray(self.g(x), dtype=float)
        bad = ~np.isfinite(out)
        if np.any(bad):
            raise CoefficientError("g", None, x[np.argmax(bad)])
        return out

    def with_terminal(self, g: Callable, L_g: Optional[float] = None, spec=None) -> "HJBProblem":
        consts = self.constants if L_g is None else self.constants.replace(L_g=L_g)
        specs = dict(self.specs)
        specs["g"] = spec
        return HJBProblem(self.d, self.T, self.c, self.b1, self.b2, self.sigma, self.f1,
                          self.f2, g, consts, self.control_radius, self.family, specs)


def _quadratic_b1(sigma):
    def b1(t, x, alpha):
        return np.einsum("nji,nj->ni", sigma(t, x), alpha)
    return b1


def _half_square(t, x, alpha):
    return 0.5 * np.sum(alpha * alpha, axis=-1)


def quadratic_problem(d: int, T: float, c: float, b2_spec: AffineDrift,
                      sigma_spec: IsotropicSigma, f2_spec: ScalarField,
                      g_spec: ScalarField, constants: Optional[dict] = None) -> HJBProblem:
    """Build a member of the quadratic family.

    ``b1 = sigma^T alpha`` and ``f1 = |alpha|^2 / 2`` over the full control
    space, so the Hamiltonian minimum is ``-|sigma^T p|^2 / 2 + b2.p + f2``
    and the feedback is ``-sigma^T Du``. Regularity constants follow from the
    spec parameters; ``constants`` overrides any of them by name.
    """
    for what, v in (("horizon", T), ("discount", c)):
        _finite(v, what)
    _finite(b2_spec.matrix, "b2 matrix")
    _finite(b2_spec.offset, "b2 offset")
    for name, s in (("f2", f2_spec), ("g", g_spec)):
        _finite(s.slope, f"{name} slope")
        _finite(s.offset, f"{name} offset")
    _finite([sigma_spec.scale, sigma_spec.slope], "sigma parameters")
    if b2_spec.matrix.shape != (d, d) or b2_spec.offset.shape != (d,):
        raise ProblemError("b2 spec does not match the dimension")
    if f2_spec.slope.shape != (d,) or g_spec.slope.shape != (d,):
        raise ProblemError("scalar spec slopes must have length d")
    if g_spec.profile != "constant":
        raise ProblemError("terminal cost cannot carry a time profile")

    s_max = sigma_spec.ceiling
    s_lip = sigma_spec.lipschitz
    osc = sigma_spec.ceiling - sigma_spec.floor
    f2_level = f2_spec.growth
    f2_profile = f2_spec.theta
    k = RegularityConstants(
        L_b=max(s_max, s_lip, b2_spec.growth),
        L_f1=0.0,
        c_f1=0.5, c_f1_prime=0.0, C_f1=0.5, C_f1_prime=0.0,
        L_f2=lambda t: f2_level * f2_profile(t),
        L_f2_integral=f2_level * T,
        L_sigma=math.sqrt(d) * math.sqrt(s_lip * osc),
        L_g=g_spec.lipschitz,
        eta_sigma=sigma_spec.floor**2,
        L_A=s_max,
    )
    if constants:
        k = k.replace(**constants)
    return HJBProblem(
        d=d, T=float(T), c=float(c),
        b1=_quadratic_b1(sigma_spec), b2=b2_spec, sigma=sigma_spec,
        f1=_half_square, f2=f2_spec, g=lambda x: g_spec(0.0, x),
        constants=k, control_radius=None, family=QUADRATIC,
        specs={"b2": b2_spec, "sigma": sigma_spec, "f2": f2_spec, "g": g_spec},
    )


def closed_form_problem(T: float = 1.0) -> HJBProblem:
    """d=1, c=0, b2=0, sigma=1, f2=0, g(x)=x; solution ``x + (t - T)/2``."""
    return quadratic_problem(
        1, T, 0.0,
        AffineDrift(np.zeros((1, 1)), np.zeros(1)),
        IsotropicSigma(1.0),
        ScalarField(np.zeros(1), T=T),
        ScalarField(np.ones(1), T=T),
    )


def zero_problem(d: int = 1, T: float = 1.0) -> HJBProblem:
    return quadratic_problem(
        d, T, 0.0,
        AffineDrift(np.zeros((d, d)), np.zeros(d)),
        IsotropicSigma(1.0),
        ScalarField(np.zeros(d), T=T),
        ScalarField(np.zeros(d), T=T),
    )


def control_bound_radius(k: RegularityConstants, grad_bound: float) -> float:
    """Radius ``L_A (1 + grad_bound)`` that optimal controls cannot leave."""
    if not (np.isfinite(grad_bound) and grad_bound >= 0):
        raise ProblemError(f"gradient bound must be finite and nonnegative, got {grad_bound}")
    return k.L_A * (1.0 + grad_bound)


# -- sampling audit ----------------------------------------------------------

@dataclass(frozen=True)
class AssumptionRecord:
    name: str
    estimated: float
    declared: float
    margin: float
    passed: bool
    lower_bound: bool = False


@dataclass(frozen=True)
class AssumptionReport:
    records: tuple
    n_samples: int
    seed: int
    box_radius: float
    slack: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def __getitem__(self, name: str) -> AssumptionRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)


def _evaluate(name, fn, t, x, *rest):
    out = np.asarray(fn(t, x, *rest), dtype=float)
    bad = ~np.isfinite(out)
    if np.any(bad):
        row = np.argwhere(bad)[0][0]
        raise CoefficientError(name, t, x[row], rest[0][row] if rest else None)
    return out


def _upper_record(name, estimated, declared, slack, atol=1e-12):
    limit = declared * (1 + slack) + atol
    return AssumptionRecord(name, float(estimated), float(declared),
                            float(limit - estimated), bool(estimated <= limit))


def validate_assumptions(p: HJBProblem, n_samples: int, box_radius: float, seed: int,
                         slack: float = 0.05) -> AssumptionReport:
    """Audit the declared constants by sampling inside ``[-r, r]^d``.

    Each estimate is a sampled supremum, hence a lower bound for the true
    constant. Pairs are half far-apart, half close (scale ``1e-3 r``) so that
    both the growth and the local regularity regimes are exercised.
    """
    if n_samples < 2:
        raise ProblemError("n_samples must be at least 2")
    if not box_radius > 0:
        raise ProblemError("box_radius must be positive")
    rng = np.random.default_rng(seed)
    d, T, k = p.d, p.T, p.constants
    n = int(n_samples)
    levels = np.linspace(0.0, T, 33)
    t = levels[rng.integers(0, levels.size, n)]
    x = rng.uniform(-box_radius, box_radius, (n, d))
    y = rng.uniform(-box_radius, box_radius, (n, d))
    near = rng.random(n) < 0.5
    y[near] = x[near] + 1e-3 * box_radius * rng.standard_normal((near.sum(), d))
    alpha = box_radius * rng.standard_normal((n, d))
    if p.control_radius is not None:
        nrm = np.linalg.norm(alpha, axis=1, keepdims=True)
        alpha = alpha * np.minimum(1.0, p.control_radius / np.maximum(nrm, 1e-300))

    dist = np.linalg.norm(x - y, axis=1)
    ok = dist > 0
    na = np.linalg.norm(alpha, axis=1)
    nx = np.linalg.norm(x, axis=1)

    def per_time(name, fn, pts, *rest):
        out = None
        for s in np.unique(t):
            sel = t == s
            val = _evaluate(name, fn, s, pts[sel], *(r[sel] for r in rest))
            if out is None:
                out = np.empty((n,) + val.shape[1:])
            out[sel] = val
        return out

    b1x = per_time("b1", p.b1, x, alpha)
    b1y = per_time("b1", p.b1, y, alpha)
    b2x = per_time("b2", p.b2, x)
    b2y = per_time("b2", p.b2, y)
    f1x = per_time("f1", p.f1, x, alpha)
    f1y = per_time("f1", p.f1, y, alpha)
    f2x = per_time("f2", p.f2, x)
    f2y = per_time("f2", p.f2, y)
    sx = per_time("sigma", p.sigma, x)
    sy = per_time("sigma", p.sigma, y)
    gx = _evaluate("g", lambda _t, z: p.g(z), 0.0, x)
    gy = _evaluate("g", lambda _t, z: p.g(z), 0.0, y)

    def quotient(num, den):
        return float(np.max(np.where(ok, num / np.where(ok, den, 1.0), 0.0)))

    est_Lb = max(
        quotient(np.linalg.norm(b1x - b1y, axis=1), (1 + na) * dist),
        quotient(np.linalg.norm(b2x - b2y, axis=1), dist),
        float(np.max(np.linalg.norm(b1x, axis=1) / (1 + na))),
        float(np.max(np.linalg.norm(b2x, axis=1) / (1 + nx))),
    )
    records = [_upper_record("L_b", est_Lb, k.L_b, slack)]
    records.append(_upper_record("L_f1", quotient(np.abs(f1x - f1y), dist), k.L_f1, slack))
    # coercivity sandwich, expressed as the additive constants it requires
    records.append(_upper_record("c_f1_prime", np.max(k.c_f1 * na**2 - f1x), k.c_f1_prime, slack))
    records.append(_upper_record("C_f1_prime", np.max(f1x - k.C_f1 * na**2), k.C_f1_prime, slack))

    lf2 = np.array([k.L_f2(s) for s in t])
    need = np.maximum(np.where(ok, np.abs(f2x - f2y) / np.where(ok, dist, 1.0), 0.0),
                      np.abs(f2x) / (1 + nx))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lf2 > 0, need / lf2, np.where(need > 1e-12, np.inf, 0.0))
    records.append(_upper_record("L_f2(t) ratio", float(np.max(ratio)), 1.0, slack))

    frob = np.linalg.norm((sx - sy).reshape(n, -1), axis=1)
    records.append(_upper_record("L_sigma", quotient(frob, np.sqrt(dist)), k.L_sigma, slack))
    records.append(_upper_record("L_g", quotient(np.abs(gx - gy), dist), k.L_g, slack))

    a = sx @ np.swapaxes(sx, -1, -2)
    eta = float(np.min(np.linalg.eigvalsh(a)))
    eta_ok = eta * (1 + slack) >= k.eta_sigma
    records.append(AssumptionRecord("eta_sigma", eta, k.eta_sigma,
                                    float(eta * (1 + slack) - k.eta_sigma), bool(eta_ok),
                                    lower_bound=True))

    # control-norm slope, via the Hamiltonian argmin at random gradients
    from .solver import hamiltonian_min_batch
    grads = box_radius * rng.standard_normal((n, d))
    gnorm = np.linalg.norm(grads, axis=1)
    R_big = 10.0 * max(1.0, k.L_A) * (1.0 + float(np.max(gnorm)))
    _, arg = hamiltonian_min_batch(p, t[0], x, grads, p.effective_radius(R_big), m_alpha=40)
    est_LA = float(np.max(np.linalg.norm(arg, axis=1) / (1 + gnorm)))
    records.append(_upper_record("L_A", est_LA, k.L_A, slack))

    return AssumptionReport(tuple(records), n, int(seed), float(box_radius), float(slack))

"""Strict INI experiment configuration.

Sections ``problem``, ``grid``, ``solver``, ``mc``, ``certificates`` and
``output`` are required, ``lemmas`` is optional. Unknown sections or keys are
fatal, and every error names the offending key and its line.
"""

from __future__ import annotations

import configparser
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimates import CertificateThresholds
from .grid import Grid, build_grid
from .mc import SimulationConfig
from .problem import (CUSTOM, FAMILIES, QUADRATIC, AffineDrift, HJBProblem, IsotropicSigma,
                      ProblemError, RegularityConstants, ScalarField, constant_profile,
                      quadratic_problem)
from .solver import EXPLICIT, IMPLICIT, SchemeConfig

# scalar regularity constants that ``constants.<name>`` may override;
# ``constants.L_f2`` sets a constant-in-time level
CONSTANT_NAMES = tuple(k for k in RegularityConstants.__dataclass_fields__ if k != "L_f2_integral")
REQUIRED = ("problem", "grid", "solver", "mc", "certificates", "output")
OPTIONAL = ("lemmas",)


class ConfigError(ValueError):
    pass


def _none(v: str) -> bool:
    return v.strip().lower() in ("", "none")


# parsers take the raw string and raise ValueError on bad input
def _float(v):
    x = float(v)
    if math.isnan(x):
        raise ValueError("nan is not allowed")
    return x


def _int(v):
    return int(v)


def _bool(v):
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _str(v):
    return v.strip()


def _opt_float(v):
    return None if _none(v) else _float(v)


def _auto_float(v):
    return None if v.strip().lower() == "auto" else _float(v)


def _vector(v):
    return np.array([_float(s) for s in v.split()], dtype=float)


def _vectors(v):
    """Semicolon-separated whitespace vectors."""
    return [_vector(s) for s in v.split(";") if s.strip()]


def _choice(*options):
    def parse(v):
        s = v.strip()
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s
    return parse


SCHEMA = {
    "problem": {
        "family": (_choice(*FAMILIES), QUADRATIC),
        "dimension": (_int, "1"), "horizon": (_float, "1"), "discount": (_float, "0"),
        "control_radius": (_opt_float, "none"),
        "b2.matrix": (_vector, "0"), "b2.offset": (_vector, "0"), "b2.clamp": (_opt_float, "none"),
        "sigma.scale": (_float, "1"), "sigma.mode": (_str, "constant"),
        "sigma.slope": (_float, "0"), "sigma.clamp": (_opt_float, "none"),
        "f2.slope": (_vector, "0"), "f2.offset": (_float, "0"), "f2.mode": (_str, "affine"),
        "f2.clamp": (_opt_float, "none"), "f2.profile": (_str, "constant"),
        "g.slope": (_vector, "0"), "g.offset": (_float, "0"), "g.mode": (_str, "affine"),
        "g.clamp": (_opt_float, "none"),
    },
    "grid": {
        "center": (_vector, "0"), "R_x": (_float, "4"), "n_x": (_int, "129"),
        "n_t": (_int, "256"), "ladder": (_int, "4"),
    },
    "solver": {
        "mode": (_choice(IMPLICIT, EXPLICIT, "implicit", "explicit"), "implicit"),
        "m_alpha": (_int, "20"), "tol_policy": (_float, "1e-10"), "max_sweeps": (_int, "50"),
        "lin_tol": (_float, "1e-9"), "R0_control": (_float, "1"), "tol_truncation": (_float, "1e-6"),
        "max_doublings": (_int, "12"), "boundary": (_choice("linear", "monotone"), "linear"),
    },
    "mc": {
        "n_paths": (_int, "100000"), "dt_sim": (_auto_float, "auto"), "seed": (_int, "0"),
        "antithetic": (_bool, "false"), "baselines": (_vectors, ""), "allowance": (_auto_float, "auto"),
        "points": (_vectors, "0 0"), "workers": (_int, "1"),
    },
    "certificates": {
        "core_fraction": (_float, "0.6"), "sup_grad_max": (_float, "inf"),
        "lipschitz_max": (_float, "inf"), "growth_max": (_float, "inf"),
        "K_tilde": (_auto_float, "auto"), "M_tilde_max": (_auto_float, "auto"),
        "consistency_rel": (_float, "0.05"), "n_pairs": (_int, "10000"), "seed": (_int, "0"),
        "ladder_spread": (_float, "0.05"), "crosscheck": (_bool, "false"),
        "crosscheck_factor": (_float, "3"),
    },
    "output": {"dir": (_str, "out")},
    "lemmas": {
        "n_instances": (_int, "10000"), "d_max_trace": (_int, "8"), "d_max_doubling": (_int, "6"),
        "seed": (_int, "0"), "dump": (_int, "100"),
    },
}


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if current == section and key is not None:
            m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
            if m and m.group(1).strip() == key:
                return no
    return None


def _where(text, section, key=None) -> str:
    no = _line_of(text, section, key)
    name = f"[{section}]" + (f" {key}" if key else "")
    return f"{name} (line {no})" if no else name


@dataclass
class ExperimentConfig:
    problem: dict
    grid: dict
    solver: dict
    mc: dict
    certificates: dict
    output: dict
    lemmas: dict
    sha256: str
    path: str = ""
    explicit: dict = field(default_factory=dict)  # section -> keys present in the file

    # -- builders ---------------------------------------------------------

    def build_problem(self) -> HJBProblem:
        q = self.problem
        d, T = q["dimension"], q["horizon"]
        try:
            matrix = _shape(q["b2.matrix"], (d, d), "b2.matrix")
            offset = _shape(q["b2.offset"], (d,), "b2.offset")
            b2 = AffineDrift(matrix, offset, q["b2.clamp"])
            sigma = IsotropicSigma(q["sigma.scale"], q["sigma.mode"], q["sigma.slope"], q["sigma.clamp"])
            f2 = ScalarField(_shape(q["f2.slope"], (d,), "f2.slope"), q["f2.offset"], q["f2.mode"],
                             q["f2.clamp"], q["f2.profile"], T)
            g = ScalarField(_shape(q["g.slope"], (d,), "g.slope"), q["g.offset"], q["g.mode"],
                            q["g.clamp"], "constant", T)
            p = quadratic_problem(d, T, q["discount"], b2, sigma, f2, g, self.constant_overrides())
        except ProblemError as exc:
            raise ConfigError(f"[problem]: {exc}") from exc
        if q["family"] == CUSTOM or q["control_radius"] is not None:
            # same coefficients handled by the generic mesh minimiser, optionally on a ball
            p = HJBProblem(p.d, p.T, p.c, p.b1, p.b2, p.sigma, p.f1, p.f2, p.g, p.constants,
                           q["control_radius"], q["family"], p.specs)
        return p

    def constant_overrides(self) -> dict:
        out = dict(self.problem.get("constants", {}))
        if "L_f2" in out:
            level = out["L_f2"]
            out["L_f2"] = constant_profile(level)
            out["L_f2_integral"] = level * self.problem["horizon"]
        return out

    def build_grid(self, level: int = 0, box_factor: float = 1.0) -> Grid:
        g = self.grid
        n_x = (g["n_x"] - 1) * 2**level + 1
        n_t = g["n_t"] * 2**level
        return build_grid(g["center"], g["R_x"] * box_factor, n_x, n_t, self.problem["horizon"])

    def ladder_rungs(self) -> list:
        """``(level, box_factor)`` pairs, level-major over ``{R_x, 2 R_x}``."""
        out = []
        level = 0
        while len(out) < self.grid["ladder"]:
            out.append((level, 1.0))
            if len(out) < self.grid["ladder"]:
                out.append((level, 2.0))
            level += 1
        return out

    def scheme(self) -> SchemeConfig:
        s = self.solver
        mode = {"implicit": IMPLICIT, "explicit": EXPLICIT}.get(s["mode"], s["mode"])
        return SchemeConfig(mode, s["m_alpha"], s["tol_policy"], s["max_sweeps"], s["lin_tol"],
                            s["boundary"])

    def simulation(self, grid: Grid) -> SimulationConfig:
        m = self.mc
        dt = grid.dt if m["dt_sim"] is None else m["dt_sim"]
        return SimulationConfig(m["n_paths"], dt, m["seed"], m["antithetic"], m["workers"])

    def allowance(self, grid: Grid) -> float:
        a = self.mc["allowance"]
        return 2.0 * (grid.h + grid.dt) if a is None else a

    def points(self) -> list:
        return [(float(v[0]), v[1:]) for v in self.mc["points"]]

    def baselines(self) -> list:
        return list(self.mc["baselines"])

    def thresholds(self) -> CertificateThresholds:
        c = self.certificates
        return CertificateThresholds(c["core_fraction"], c["sup_grad_max"], c["lipschitz_max"],
                                     c["growth_max"], c["K_tilde"], c["M_tilde_max"],
                                     c["consistency_rel"], c["n_pairs"], c["seed"])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        mc = dict(self.mc, seed=seed)
        cert = dict(self.certificates, seed=seed)
        lem = dict(self.lemmas, seed=seed)
        return ExperimentConfig(self.problem, self.grid, self.solver, mc, cert, self.output, lem,
                                self.sha256, self.path, self.explicit)

    def section_items(self, section: str):
        """Sorted (key, canonical text) pairs, for the manifest."""
        out = []
        items = dict(getattr(self, section))
        for name, value in items.pop("constants", {}).items():
            items[f"constants.{name}"] = value
        for k, v in sorted(items.items()):
            if isinstance(v, np.ndarray):
                v = " ".join(f"{x:.17g}" for x in v)
            elif isinstance(v, list):
                v = "; ".join(" ".join(f"{x:.17g}" for x in vec) for vec in v)
            elif isinstance(v, float):
                v = f"{v:.17g}"
            out.append((k, str(v)))
        return out


def _shape(v: np.ndarray, shape, name):
    if v.size == 1 and int(np.prod(shape)) > 1 and v[0] == 0:
        return np.zeros(shape)
    if v.size != int(np.prod(shape)):
        raise ConfigError(f"[problem] {name}: expected {int(np.prod(shape))} entries, got {v.size}")
    return v.reshape(shape)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    text = raw.decode("utf-8")
    return parse_config(text, str(path), hashlib.sha256(raw).hexdigest())


def parse_config(text: str, path: str = "<string>", sha256: str | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#",))
    cp.optionxform = str  # keys are case sensitive
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    unknown = [s for s in cp.sections() if s not in REQUIRED + OPTIONAL]
    if unknown:
        raise ConfigError(f"unknown section {_where(text, unknown[0])}")
    missing = [s for s in REQUIRED if not cp.has_section(s)]
    if missing:
        raise ConfigError(f"missing section [{missing[0]}]")
    values, explicit = {}, {}
    for section, schema in SCHEMA.items():
        present = dict(cp.items(section)) if cp.has_section(section) else {}
        overrides = {}
        if section == "problem":
            for key in [k for k in present if k.startswith("constants.")]:
                name = key.split(".", 1)[1]
                if name not in CONSTANT_NAMES:
                    raise ConfigError(f"unknown constant {_where(text, section, key)}")
                try:
                    overrides[name] = _float(present.pop(key))
                except ValueError as exc:
                    raise ConfigError(f"bad value for {_where(text, section, key)}: {exc}") from exc
        extra = [k for k in present if k not in schema]
        if extra:
            raise ConfigError(f"unknown key {_where(text, section, extra[0])}")
        out = {}
        for key, (parse, default) in schema.items():
            raw = present.get(key, default)
            try:
                out[key] = parse(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value {raw!r} for {_where(text, section, key)}: {exc}") from exc
        if section == "problem":
            out["constants"] = overrides
        values[section] = out
        explicit[section] = sorted(present) + [f"constants.{k}" for k in sorted(overrides)]
    cfg = ExperimentConfig(**values, sha256=sha256 or hashlib.sha256(text.encode()).hexdigest(),
                           path=path, explicit=explicit)
    _validate(cfg, text)
    return cfg


def _validate(cfg: ExperimentConfig, text: str):
    def fail(section, key, msg):
        raise ConfigError(f"{_where(text, section, key)}: {msg}")

    q, g, s, m, c = cfg.problem, cfg.grid, cfg.solver, cfg.mc, cfg.certificates
    if q["dimension"] < 1:
        fail("problem", "dimension", "dimension must be at least 1")
    if not q["horizon"] > 0 or not math.isfinite(q["horizon"]):
        fail("problem", "horizon", "horizon must be positive and finite")
    if g["center"].size == 1 and q["dimension"] > 1:
        g["center"] = np.full(q["dimension"], g["center"][0])
    if g["center"].size != q["dimension"]:
        fail("grid", "center", f"needs {q['dimension']} entries")
    if not (g["R_x"] > 0 and math.isfinite(g["R_x"])):
        fail("grid", "R_x", "box half-width must be positive")
    if g["n_x"] < 3:
        fail("grid", "n_x", "need at least 3 nodes per axis")
    if g["n_t"] < 1:
        fail("grid", "n_t", "need at least one time step")
    if g["ladder"] < 1:
        fail("grid", "ladder", "ladder length must be positive")
    if not s["R0_control"] > 0:
        fail("solver", "R0_control", "initial radius must be positive")
    if not s["tol_truncation"] > 0:
        fail("solver", "tol_truncation", "tolerance must be positive")
    if s["max_doublings"] < 0:
        fail("solver", "max_doublings", "must be nonnegative")
    try:
        cfg.scheme()
    except ValueError as exc:
        fail("solver", None, str(exc))
    if m["n_paths"] < 1:
        fail("mc", "n_paths", "must be positive")
    if m["antithetic"] and m["n_paths"] % 2:
        fail("mc", "n_paths", "antithetic sampling needs an even path count")
    if m["dt_sim"] is not None and not m["dt_sim"] > 0:
        fail("mc", "dt_sim", "must be positive")
    if m["allowance"] is not None and not m["allowance"] >= 0:
        fail("mc", "allowance", "must be nonnegative")
    for v in m["points"]:
        if v.size != q["dimension"] + 1:
            fail("mc", "points", f"each point is 't x_1 .. x_d' ({q['dimension'] + 1} numbers)")
        if not 0 <= v[0] <= q["horizon"]:
            fail("mc", "points", f"time {v[0]} outside [0, T]")
    for v in m["baselines"]:
        if v.size not in (1, q["dimension"]):
            fail("mc", "baselines", f"each baseline needs 1 or {q['dimension']} entries")
    if m["workers"] < 1:
        fail("mc", "workers", "must be positive")
    if not 0 < c["core_fraction"] <= 1:
        fail("certificates", "core_fraction", "must lie in (0, 1]")
    if c["n_pairs"] < 1:
        fail("certificates", "n_pairs", "must be positive")
    if c["crosscheck"]:
        if q["family"] != QUADRATIC:
            fail("certificates", "crosscheck", "the transform route needs the quadratic family")
        if q["discount"] != 0:
            fail("certificates", "crosscheck", "the transform route needs c = 0")
        if q["control_radius"] is not None:
            fail("certificates", "crosscheck", "the transform route needs unbounded controls")
    if q["family"] == CUSTOM and q["control_radius"] is None:
        fail("problem", "control_radius", "the custom family needs a control ball radius")
    cfg.build_problem()

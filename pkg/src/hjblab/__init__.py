"""Finite-difference HJB solver with certificates, a Cole-Hopf cross-check,
Monte Carlo verification and the two supporting matrix inequalities."""

__version__ = "0.1.0"

from .grid import Grid, ValueFunction, build_grid, interpolate
from .problem import HJBProblem, RegularityConstants, closed_form_problem, quadratic_problem, zero_problem
from .solver import ControlField, SchemeConfig, solve, solve_with_truncation_escalation

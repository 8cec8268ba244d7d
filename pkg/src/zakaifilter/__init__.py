"""Finite-volume solver for the Zakai filtering equation with reference oracles."""

from __future__ import annotations

from .config import ScenarioConfig
from .diagnostics import DiagnosticsReport, diagnose, mass_identity_residual
from .errors import (
    AssemblyError,
    BlowupError,
    ConfigError,
    DegeneracyError,
    EvaluationError,
    GridMismatch,
    InsufficientResolution,
    LinearSolveError,
    MassCollapseError,
    QuadratureError,
    RiccatiBlowup,
    SingularObservationNoise,
    ZakaiError,
)
from .grid import GridSpec
from .model import SystemSpec, condition_coefficients, mollify_theta, verify_assumptions
from .oracles import LinearGaussianSpec, density_distance, kalman_bucy, particle_filter
from .scenarios import builtin
from .sde_sim import PathSample, simulate_system
from .zakai import DensityField, FilterState, FilterTrajectory, solve_zakai, step

__version__ = "0.1.0"

__all__ = [
    "AssemblyError", "BlowupError", "ConfigError", "DegeneracyError", "DensityField",
    "DiagnosticsReport", "EvaluationError", "FilterState", "FilterTrajectory", "GridMismatch",
    "GridSpec", "InsufficientResolution", "LinearGaussianSpec", "LinearSolveError",
    "MassCollapseError", "PathSample", "QuadratureError", "RiccatiBlowup", "ScenarioConfig",
    "SingularObservationNoise", "SystemSpec", "ZakaiError", "builtin", "condition_coefficients",
    "density_distance", "diagnose", "kalman_bucy", "mass_identity_residual", "mollify_theta",
    "particle_filter", "simulate_system", "solve_zakai", "step", "verify_assumptions",
]

"""Exception hierarchy shared by the engine."""

from __future__ import annotations


class ZakaiError(Exception):
    """Base class for all engine errors."""


class ConfigError(ZakaiError, ValueError):
    """Invalid scenario configuration or argument."""


class EvaluationError(ZakaiError):
    """A coefficient function returned non-finite values."""


class SingularObservationNoise(ZakaiError):
    """Theta Theta^T is numerically singular."""


class QuadratureError(ZakaiError):
    """Mollifier quadrature failed to normalize."""


class BlowupError(ZakaiError):
    """A simulated path left the guard radius."""


class AssemblyError(ZakaiError):
    """Face-averaged diffusion lost positive definiteness."""


class LinearSolveError(ZakaiError):
    """The implicit substep could not be solved to tolerance."""


class MassCollapseError(ZakaiError):
    """Total unnormalized mass fell below the collapse threshold."""


class InsufficientResolution(ZakaiError, ValueError):
    """Not enough lag levels to fit a Hoelder exponent."""


class RiccatiBlowup(ZakaiError):
    """Kalman-Bucy covariance lost positive definiteness."""


class DegeneracyError(ZakaiError):
    """Particle ensemble collapsed even after resampling."""


class GridMismatch(ZakaiError, ValueError):
    """Two density fields live on different grids."""

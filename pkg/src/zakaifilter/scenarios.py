"""Built-in scenarios used by the acceptance suite and shipped as YAML files.

All are one-dimensional signals with a one-dimensional observation
(``d = 1``, ``d1 = d2 = 2``); the first Wiener coordinate drives the signal
only and the second drives the observation.
"""

from __future__ import annotations

import math

from .config import ScenarioConfig
from .errors import ConfigError

SQRT2 = math.sqrt(2.0)


def _general(name, b, theta, B, Theta, pi0, K, delta, T, **extra):
    return {"kind": "general", "name": name, "d": 1, "d1": 2, "d2": 2, "b": b, "theta": theta,
            "B": B, "Theta": Theta, "pi0": pi0, "K": K, "delta": delta, "T": T, **extra}


def kalman() -> ScenarioConfig:
    """Linear-Gaussian benchmark with ``A = -1, H = 1, theta = Theta = 1``."""
    return ScenarioConfig.from_dict({
        "system": {"kind": "linear_gaussian", "name": "kalman", "A": [[-1.0]], "a0": [0.0],
                   "H": [[1.0]], "theta": [[1.0]], "Theta": [[1.0]], "m0": [0.0],
                   "P0": [[1.0]], "K": 2.0, "delta": 0.5, "T": 1.0},
        "grid": {"R": 6.0, "h": 0.02},
        "time": {"dt": 1e-3},
        "run": {"seeds": list(range(100)), "snapshot_every": 1},
        "oracle": {"particles": 0, "kalman": True},
        "output": "out/kalman",
    })


def heat() -> ScenarioConfig:
    """Uninformative observations and ``a = 1``: the density solves ``u_t = u_xx``."""
    return ScenarioConfig.from_dict({
        "system": _general(
            "heat",
            b={"family": "constant", "value": [0.0]},
            theta={"family": "constant", "value": [[SQRT2, 0.0]]},
            B={"family": "constant", "value": [0.0]},
            Theta={"family": "constant", "value": [[0.0, 1.0]]},
            pi0={"kind": "gaussian", "mean": [0.0], "cov": [[0.25]]},
            K=1.0, delta=0.5, T=0.5,
        ),
        "grid": {"R": 6.0, "h": 0.02},
        "time": {"dt": 1e-3},
        "run": {"seeds": [0], "snapshot_every": 100},
    })


def generic() -> ScenarioConfig:
    """Sinusoidally perturbed Lipschitz coefficients with a cross term.

    ``b = -x + 0.3 sin y``, ``theta = (1 + 0.2 sin 2x, 0.5)``,
    ``B = 0.5 x + 0.3 sin y``, ``Theta = (0, 1 + 0.2 sin y)``. The path is
    simulated four times finer than the filter step.
    """
    return ScenarioConfig.from_dict({
        "system": _general(
            "generic",
            b=[{"family": "linear", "matrix": [[-1.0, 0.0]]},
               {"family": "sinusoidal", "amplitude": [0.3], "freq": [0.0, 1.0]}],
            theta=[{"family": "constant", "value": [[1.0, 0.5]]},
                   {"family": "sinusoidal", "amplitude": [[0.2, 0.0]], "freq": [2.0, 0.0]}],
            B=[{"family": "linear", "matrix": [[0.5, 0.0]]},
               {"family": "sinusoidal", "amplitude": [0.3], "freq": [0.0, 1.0]}],
            Theta=[{"family": "constant", "value": [[0.0, 1.0]]},
                   {"family": "sinusoidal", "amplitude": [[0.0, 0.2]], "freq": [1.0]}],
            pi0={"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]},
            K=2.5, delta=0.15, T=1.0,
        ),
        "grid": {"R": 6.0, "h": 0.02},
        "time": {"dt": 1e-3, "path_dt": 2.5e-4},
        "run": {"seeds": list(range(20)), "snapshot_every": 1},
    })


def cross_term() -> ScenarioConfig:
    """Correlated noise (``sigma = 0.6``) with a nonlinear observation drift.

    The transport part of the noise operator is large here, so the filter uses
    the Milstein stochastic substep.
    """
    return ScenarioConfig.from_dict({
        "system": _general(
            "cross_term",
            b=[{"family": "linear", "matrix": [[-1.0, 0.0]]},
               {"family": "sinusoidal", "amplitude": [0.5], "freq": [1.0, 0.0]}],
            theta={"family": "constant", "value": [[0.8, 0.6]]},
            B=[{"family": "linear", "matrix": [[1.0, 0.0]]},
               {"family": "sinusoidal", "amplitude": [0.5], "freq": [2.0, 0.0]}],
            Theta={"family": "constant", "value": [[0.0, 1.0]]},
            pi0={"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]},
            K=2.5, delta=0.15, T=1.0,
        ),
        "grid": {"R": 6.0, "h": 0.02},
        "time": {"dt": 1e-3},
        "run": {"seeds": list(range(100)), "snapshot_every": None, "noise": "milstein"},
        "oracle": {"particles": 100000},
    })


def kink() -> ScenarioConfig:
    """Signal diffusion with a Lipschitz kink: ``theta_1 = 0.6 + 0.4 min(|x|, 2)``."""
    return ScenarioConfig.from_dict({
        "system": _general(
            "kink",
            b={"family": "linear", "matrix": [[-1.0, 0.0]]},
            theta=[{"family": "constant", "value": [[0.6, 0.0]]},
                   {"family": "kink", "amplitude": [[0.4, 0.0]], "direction": [1.0, 0.0],
                    "cap": 2.0}],
            B={"family": "linear", "matrix": [[1.0, 0.0]]},
            Theta={"family": "constant", "value": [[0.0, 1.0]]},
            pi0={"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]},
            K=1.5, delta=0.15, T=1.0,
        ),
        "grid": {"R": 6.0, "h": 0.02},
        "time": {"dt": 1e-3},
        "run": {"seeds": [0], "snapshot_every": None},
    })


def holder() -> ScenarioConfig:
    """Compactly supported Lipschitz (tent) initial density, informative observations."""
    return ScenarioConfig.from_dict({
        "system": _general(
            "holder",
            b={"family": "linear", "matrix": [[-1.0, 0.0]]},
            theta={"family": "constant", "value": [[1.0, 0.0]]},
            B={"family": "linear", "matrix": [[2.0, 0.0]]},
            Theta={"family": "constant", "value": [[0.0, 1.0]]},
            pi0={"kind": "tent", "center": [0.0], "width": [1.0]},
            K=2.0, delta=0.5, T=1.0,
        ),
        "grid": {"R": 5.0, "h": 0.02},
        "time": {"dt": 2.5e-4},
        "run": {"seeds": list(range(20)), "snapshot_every": 1},
    })


BUILTIN = {
    "kalman": kalman,
    "heat": heat,
    "generic": generic,
    "cross_term": cross_term,
    "kink": kink,
    "holder": holder,
}


def builtin(name: str) -> ScenarioConfig:
    if name not in BUILTIN:
        raise ConfigError(f"unknown built-in scenario {name!r}; known: {', '.join(BUILTIN)}")
    return BUILTIN[name]()

from __future__ import annotations

import math

import numpy as np
import pytest

from zakaifilter.densities import build_density
from zakaifilter.families import build_coefficient
from zakaifilter.grid import GridSpec
from zakaifilter.model import SystemSpec

SQRT2 = math.sqrt(2.0)


def scalar_spec(b=None, theta=None, B=None, Theta=None, pi0=None, K=3.0, delta=0.1, T=1.0,
                name="test"):
    """``d = 1, d1 = d2 = 2`` system from family configs, heat defaults."""
    b = b or {"family": "constant", "value": [0.0]}
    theta = theta or {"family": "constant", "value": [[SQRT2, 0.0]]}
    B = B or {"family": "constant", "value": [0.0]}
    Theta = Theta or {"family": "constant", "value": [[0.0, 1.0]]}
    pi0 = pi0 or {"kind": "gaussian", "mean": [0.0], "cov": [[0.25]]}
    return SystemSpec(
        d=1, d1=2, d2=2,
        b=build_coefficient(b, 2, (1,), "b"),
        theta=build_coefficient(theta, 2, (1, 2), "theta"),
        B=build_coefficient(B, 2, (1,), "B"),
        Theta=build_coefficient(Theta, 1, (1, 2), "Theta"),
        K=K, delta=delta, T=T, pi0=build_density(pi0), name=name,
    )


@pytest.fixture
def heat_spec():
    return scalar_spec()


@pytest.fixture
def grid1():
    return GridSpec.symmetric(6.0, 0.05, 1)


def gaussian(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)

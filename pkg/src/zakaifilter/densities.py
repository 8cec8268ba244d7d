"""Initial densities for the hidden signal."""

from __future__ import annotations

from typing import Any

import numpy as np
from scipy import stats

from .errors import ConfigError


class InitialDensity:
    """Nonrandom density on R^d.

    Subclasses provide ``pdf`` and a bounding ``support``; sampling falls back
    to rejection from the support box unless the density factorizes.
    """

    d: int

    def pdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self._rejection_sample(rng, n)

    def _rejection_sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo, hi = self.support()
        probe = rng.uniform(lo, hi, size=(4096, self.d))
        ceiling = 1.5 * float(np.max(self.pdf(probe))) + 1e-300
        out = np.empty((0, self.d))
        while out.shape[0] < n:
            cand = rng.uniform(lo, hi, size=(2 * n, self.d))
            keep = rng.uniform(0.0, ceiling, size=2 * n) < self.pdf(cand)
            out = np.vstack([out, cand[keep]])
        return out[:n]


class GaussianDensity(InitialDensity):
    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.d = self.mean.shape[0]
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(self.d)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (self.d, self.d):
            raise ConfigError(f"gaussian.cov: expected shape {(self.d, self.d)}, got {cov.shape}")
        if not np.allclose(cov, cov.T):
            raise ConfigError("gaussian.cov must be symmetric")
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("gaussian.cov must be positive definite") from exc
        self.cov = cov
        self._inv = np.linalg.inv(cov)
        self._norm = 1.0 / np.sqrt((2 * np.pi) ** self.d * np.linalg.det(cov))

    @property
    def is_product(self) -> bool:
        return bool(np.all(self.cov == np.diag(np.diag(self.cov))))

    def pdf(self, x):
        dx = np.asarray(x, dtype=float) - self.mean
        q = np.einsum("...i,ij,...j->...", dx, self._inv, dx)
        return self._norm * np.exp(-0.5 * q)

    def support(self):
        # six standard deviations: density below 2e-8 of the peak outside
        sd = np.sqrt(np.diag(self.cov))
        return self.mean - 6 * sd, self.mean + 6 * sd

    def sample(self, rng, n):
        if self.is_product:
            # inverse CDF along each axis
            u = rng.uniform(size=(n, self.d))
            return self.mean + np.sqrt(np.diag(self.cov)) * stats.norm.ppf(u)
        return self.mean + rng.standard_normal((n, self.d)) @ self._chol.T

    def to_dict(self):
        return {"kind": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


class TentDensity(InitialDensity):
    """Product of normalized 1-d tents ``(1/w) max(0, 1 - |x - c|/w)``.

    Lipschitz with compact support ``[c - w, c + w]`` per axis.
    """

    def __init__(self, center, width):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.d = self.center.shape[0]
        self.width = np.broadcast_to(np.asarray(width, dtype=float), (self.d,)).copy()
        if np.any(self.width <= 0):
            raise ConfigError("tent.width must be positive")

    @property
    def is_product(self) -> bool:
        return True

    def pdf(self, x):
        s = np.abs(np.asarray(x, dtype=float) - self.center) / self.width
        return np.prod(np.maximum(0.0, 1.0 - s) / self.width, axis=-1)

    def support(self):
        return self.center - self.width, self.center + self.width

    def sample(self, rng, n):
        u = rng.uniform(size=(n, self.d))
        left = -1.0 + np.sqrt(2.0 * u)
        right = 1.0 - np.sqrt(2.0 * (1.0 - u))
        s = np.where(u < 0.5, left, right)
        return self.center + self.width * s

    def to_dict(self):
        return {"kind": "tent", "center": self.center.tolist(), "width": self.width.tolist()}


DENSITIES = {"gaussian": GaussianDensity, "tent": TentDensity}


def build_density(cfg: dict[str, Any]) -> InitialDensity:
    params = dict(cfg)
    kind = params.pop("kind", None)
    if kind not in DENSITIES:
        raise ConfigError(
            f"pi0.kind: unknown density {kind!r}; known: {', '.join(sorted(DENSITIES))}"
        )
    try:
        return DENSITIES[kind](**params)
    except TypeError as exc:
        raise ConfigError(f"pi0: bad parameters for {kind!r}: {exc}") from exc

"""Uniform tensor-product grids on a truncated box."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError

MIN_NODES = 8


@dataclass(frozen=True)
class GridSpec:
    """Vertex-centred grid ``lower + h * index`` with ``nodes`` points per axis.

    Boundary nodes own half a cell along each axis they touch, so trapezoid
    quadrature and the finite-volume control volumes agree.
    """

    lower: tuple[float, ...]
    h: tuple[float, ...]
    nodes: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lower) == len(self.h) == len(self.nodes)):
            raise ConfigError("grid: lower, h and nodes must share a dimension")
        if any(hh <= 0 for hh in self.h):
            raise ConfigError("grid: h must be positive")
        if any(n < MIN_NODES for n in self.nodes):
            raise ConfigError(f"grid: need at least {MIN_NODES} nodes per axis")

    @classmethod
    def symmetric(cls, R: float, h: float, d: int = 1) -> GridSpec:
        """Grid on ``[-R, R]^d``; ``2R/h`` must be (close to) an integer."""
        if R <= 0 or h <= 0:
            raise ConfigError("grid: R and h must be positive")
        cells = 2.0 * R / h
        n_cells = int(round(cells))
        if abs(cells - n_cells) > 1e-9 * max(1.0, cells):
            raise ConfigError(f"grid.h: 2R/h = {cells} is not an integer")
        return cls((-float(R),) * d, (float(h),) * d, (n_cells + 1,) * d)

    @property
    def d(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.nodes)

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def upper(self) -> tuple[float, ...]:
        return tuple(lo + hh * (n - 1) for lo, hh, n in zip(self.lower, self.h, self.nodes))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @cached_property
    def axes(self) -> list[np.ndarray]:
        return [lo + hh * np.arange(n) for lo, hh, n in zip(self.lower, self.h, self.nodes)]

    @cached_property
    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes, indexing="ij")

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(size, d)`` in C order."""
        return np.stack([m.ravel() for m in self.mesh], axis=-1)

    def axis_weights(self, axis: int) -> np.ndarray:
        w = np.full(self.nodes[axis], self.h[axis])
        w[0] = w[-1] = 0.5 * self.h[axis]
        return w

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid weights on the grid shape."""
        w = np.ones(())
        for k in range(self.d):
            w = np.multiply.outer(w, self.axis_weights(k))
        return w

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self.weights * values))

    def contains_box(self, lower, upper, margin: float = 0.0) -> bool:
        lo = np.asarray(lower, dtype=float) - margin
        hi = np.asarray(upper, dtype=float) + margin
        return bool(np.all(np.asarray(self.lower) <= lo) and np.all(np.asarray(self.upper) >= hi))

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "h": list(self.h), "nodes": list(self.nodes)}

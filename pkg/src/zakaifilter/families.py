"""Registry of built-in coefficient families.

A coefficient is a sum of terms, each drawn from one family. Terms are
vectorized: they accept ``z`` of shape ``(..., n_in)`` and return an array of
shape ``(..., *out_shape)``. Time is accepted but ignored by every built-in
family.

Families
--------
constant
    ``value``
linear
    ``offset + matrix @ z`` with ``matrix`` of shape ``out_shape + (n_in,)``
sinusoidal
    ``amplitude * sin(freq . z + phase)``
kink
    ``amplitude * min(|direction . z - center|, cap)``
"""

from __future__ import annotations

from typing import Any, Callable

import numpy as np

from .errors import ConfigError


def _as_array(value: Any, name: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: expected numeric array, got {value!r}") from exc
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name}: non-finite entries")
    return arr


def _check_shape(arr: np.ndarray, shape: tuple[int, ...], name: str) -> np.ndarray:
    if arr.shape == ():
        return np.broadcast_to(arr, shape).copy()
    if arr.shape != shape:
        raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


class Term:
    family: str = ""

    def __init__(self, n_in: int, out_shape: tuple[int, ...]):
        self.n_in = n_in
        self.out_shape = out_shape

    def __call__(self, t: float, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def active_inputs(self) -> np.ndarray:
        """Boolean mask of input coordinates the term actually reads."""
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError

    def _expand(self, s: np.ndarray) -> np.ndarray:
        return s.reshape(s.shape + (1,) * len(self.out_shape))


class Constant(Term):
    family = "constant"

    def __init__(self, n_in, out_shape, value):
        super().__init__(n_in, out_shape)
        self.value = _check_shape(_as_array(value, "constant.value"), out_shape, "constant.value")

    def __call__(self, t, z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(self.value, z.shape[:-1] + self.out_shape)

    def active_inputs(self):
        return np.zeros(self.n_in, dtype=bool)

    def to_dict(self):
        return {"family": self.family, "value": self.value.tolist()}


class Linear(Term):
    family = "linear"

    def __init__(self, n_in, out_shape, matrix, offset=0.0):
        super().__init__(n_in, out_shape)
        self.matrix = _check_shape(
            _as_array(matrix, "linear.matrix"), out_shape + (n_in,), "linear.matrix"
        )
        self.offset = _check_shape(_as_array(offset, "linear.offset"), out_shape, "linear.offset")

    def __call__(self, t, z):
        z = np.asarray(z, dtype=float)
        return self.offset + np.tensordot(z, self.matrix, axes=([-1], [-1]))

    def active_inputs(self):
        flat = self.matrix.reshape(-1, self.n_in)
        return np.any(flat != 0.0, axis=0)

    def to_dict(self):
        return {
            "family": self.family,
            "matrix": self.matrix.tolist(),
            "offset": self.offset.tolist(),
        }


class Sinusoidal(Term):
    family = "sinusoidal"

    def __init__(self, n_in, out_shape, amplitude, freq, phase=0.0):
        super().__init__(n_in, out_shape)
        self.amplitude = _check_shape(
            _as_array(amplitude, "sinusoidal.amplitude"), out_shape, "sinusoidal.amplitude"
        )
        self.freq = _check_shape(_as_array(freq, "sinusoidal.freq"), (n_in,), "sinusoidal.freq")
        self.phase = float(phase)

    def __call__(self, t, z):
        z = np.asarray(z, dtype=float)
        s = np.sin(z @ self.freq + self.phase)
        return self.amplitude * self._expand(s)

    def active_inputs(self):
        return self.freq != 0.0

    def to_dict(self):
        return {
            "family": self.family,
            "amplitude": self.amplitude.tolist(),
            "freq": self.freq.tolist(),
            "phase": self.phase,
        }


class Kink(Term):
    family = "kink"

    def __init__(self, n_in, out_shape, amplitude, direction, center=0.0, cap=None):
        super().__init__(n_in, out_shape)
        self.amplitude = _check_shape(
            _as_array(amplitude, "kink.amplitude"), out_shape, "kink.amplitude"
        )
        self.direction = _check_shape(
            _as_array(direction, "kink.direction"), (n_in,), "kink.direction"
        )
        self.center = float(center)
        self.cap = None if cap is None else float(cap)
        if self.cap is not None and self.cap <= 0:
            raise ConfigError("kink.cap must be positive")

    def __call__(self, t, z):
        z = np.asarray(z, dtype=float)
        s = np.abs(z @ self.direction - self.center)
        if self.cap is not None:
            s = np.minimum(s, self.cap)
        return self.amplitude * self._expand(s)

    def active_inputs(self):
        return self.direction != 0.0

    def to_dict(self):
        out = {
            "family": self.family,
            "amplitude": self.amplitude.tolist(),
            "direction": self.direction.tolist(),
            "center": self.center,
        }
        if self.cap is not None:
            out["cap"] = self.cap
        return out


FAMILIES: dict[str, type[Term]] = {
    cls.family: cls for cls in (Constant, Linear, Sinusoidal, Kink)
}


class FamilySum:
    """Sum of family terms, callable as ``f(t, z)``."""

    def __init__(self, terms: list[Term], n_in: int, out_shape: tuple[int, ...]):
        if not terms:
            raise ConfigError("coefficient needs at least one term")
        self.terms = list(terms)
        self.n_in = n_in
        self.out_shape = tuple(out_shape)

    def __call__(self, t: float, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        shape = z.shape[:-1] + self.out_shape
        out = np.broadcast_to(self.terms[0](t, z), shape)
        for term in self.terms[1:]:
            out = out + term(t, z)
        return np.array(out, dtype=float)

    def active_inputs(self) -> np.ndarray:
        mask = np.zeros(self.n_in, dtype=bool)
        for term in self.terms:
            mask |= term.active_inputs()
        return mask

    def to_config(self) -> list[dict[str, Any]]:
        return [term.to_dict() for term in self.terms]


def build_term(cfg: dict[str, Any], n_in: int, out_shape: tuple[int, ...], where: str) -> Term:
    if not isinstance(cfg, dict):
        raise ConfigError(f"{where}: term must be a mapping, got {type(cfg).__name__}")
    params = dict(cfg)
    family = params.pop("family", None)
    if family is None:
        raise ConfigError(
            f"{where}: missing 'family'; known families: {', '.join(sorted(FAMILIES))}"
        )
    if family not in FAMILIES:
        raise ConfigError(
            f"{where}: unknown family {family!r}; known families: {', '.join(sorted(FAMILIES))}"
        )
    cls = FAMILIES[family]
    try:
        return cls(n_in, out_shape, **params)
    except TypeError as exc:
        raise ConfigError(f"{where}: bad parameters for family {family!r}: {exc}") from exc


def build_coefficient(
    cfg: dict[str, Any] | list[dict[str, Any]],
    n_in: int,
    out_shape: tuple[int, ...],
    where: str,
) -> FamilySum:
    """Build a coefficient from one term mapping or a list of them."""
    terms_cfg = cfg if isinstance(cfg, list) else [cfg]
    terms = [
        build_term(item, n_in, out_shape, f"{where}[{i}]") for i, item in enumerate(terms_cfg)
    ]
    return FamilySum(terms, n_in, out_shape)


def active_inputs(fn: Callable, n_in: int) -> np.ndarray:
    """Input mask for any coefficient; opaque callables are assumed to read everything."""
    if hasattr(fn, "active_inputs"):
        return np.asarray(fn.active_inputs(), dtype=bool)
    return np.ones(n_in, dtype=bool)

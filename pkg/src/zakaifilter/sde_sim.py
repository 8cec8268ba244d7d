"""Euler-Maruyama sample paths of the signal/observation system.

Path binary layout (little-endian)::

    b"ZKPATH01"
    int64  steps, d, d1, d2, seed
    float64 dt
    float64 w[steps, d2]        (Wiener increments, C order)
    float64 z[steps + 1, d1]    (x block then y block)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BlowupError, ConfigError
from .model import SystemSpec, inverse_sqrt_spd

PATH_MAGIC = b"ZKPATH01"
DEFAULT_GUARD_RADIUS = 1e6


def n_steps(T: float, dt: float, name: str = "dt") -> int:
    """Number of steps of size ``dt`` in ``[0, T]``; ``T/dt`` must be integral."""
    if not dt > 0:
        raise ConfigError(f"{name} must be positive")
    ratio = T / dt
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
        raise ConfigError(f"{name}: T/{name} = {ratio!r} is not an integer")
    return k


@dataclass(frozen=True)
class PathSample:
    dt: float
    w: np.ndarray | None  # (steps, d2) Wiener increments; None for observed data
    z: np.ndarray  # (steps + 1, d1)
    d: int
    seed: int

    @property
    def steps(self) -> int:
        return self.z.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)

    @property
    def x(self) -> np.ndarray:
        return self.z[:, : self.d]

    @property
    def y(self) -> np.ndarray:
        return self.z[:, self.d :]

    @property
    def dy(self) -> np.ndarray:
        return np.diff(self.y, axis=0)

    def coarsen(self, stride: int) -> PathSample:
        """Observe every ``stride``-th mesh point; increments are summed."""
        if stride < 1 or self.steps % stride:
            raise ConfigError(f"stride {stride} does not divide {self.steps} steps")
        if stride == 1:
            return self
        w = None if self.w is None else self.w.reshape(self.steps // stride, stride, -1).sum(axis=1)
        return PathSample(self.dt * stride, w, self.z[::stride].copy(), self.d, self.seed)


def euler_maruyama(spec: SystemSpec, z0: np.ndarray, dw: np.ndarray, dt: float,
                   guard_radius: float = DEFAULT_GUARD_RADIUS) -> np.ndarray:
    """Advance ``z_{k+1} = z_k + btilde dt + thetatilde dw_k`` for a batch.

    ``z0`` has shape ``(P, d1)`` and ``dw`` shape ``(P, steps, d2)``.
    """
    P, steps = dw.shape[0], dw.shape[1]
    z = np.empty((P, steps + 1, spec.d1))
    z[:, 0] = z0
    for k in range(steps):
        t = k * dt
        zk = z[:, k]
        drift = spec.btilde(t, zk)
        diff = spec.thetatilde(t, zk)
        z[:, k + 1] = zk + drift * dt + np.einsum("pij,pj->pi", diff, dw[:, k])
        if not np.all(np.abs(z[:, k + 1]) <= guard_radius):
            raise BlowupError(f"|z| exceeded guard radius {guard_radius:g} at step {k + 1}")
    return z


def _draw(spec: SystemSpec, steps: int, dt: float, seed: int):
    rng = np.random.default_rng(seed)
    x0 = spec.pi0.sample(rng, 1)[0]
    dw = rng.standard_normal((steps, spec.d2)) * np.sqrt(dt)
    return np.concatenate([x0, spec.y0]), dw


def simulate_system(spec: SystemSpec, dt: float, seed: int,
                    guard_radius: float = DEFAULT_GUARD_RADIUS) -> PathSample:
    steps = n_steps(spec.T, dt)
    z0, dw = _draw(spec, steps, dt, seed)
    z = euler_maruyama(spec, z0[None], dw[None], dt, guard_radius)[0]
    return PathSample(float(dt), dw, z, spec.d, int(seed))


def simulate_batch(spec: SystemSpec, dt: float, seeds: Sequence[int],
                   guard_radius: float = DEFAULT_GUARD_RADIUS) -> list[PathSample]:
    """Vectorized version of :func:`simulate_system`; path ``i`` equals the
    single-path result for ``seeds[i]``."""
    steps = n_steps(spec.T, dt)
    draws = [_draw(spec, steps, dt, s) for s in seeds]
    z0 = np.stack([d[0] for d in draws])
    dw = np.stack([d[1] for d in draws])
    z = euler_maruyama(spec, z0, dw, dt, guard_radius)
    return [PathSample(float(dt), dw[i], z[i], spec.d, int(s)) for i, s in enumerate(seeds)]


def psi_along_path(path: PathSample, spec: SystemSpec) -> tuple[np.ndarray, np.ndarray]:
    """``Psi_k`` and ``Theta_k`` at the left end of every step."""
    y = path.y[:-1]
    Th = np.stack([np.asarray(spec.Theta(k * path.dt, y[k]), dtype=float) for k in range(path.steps)])
    return inverse_sqrt_spd(Th @ np.swapaxes(Th, -1, -2)), Th


def derived_wieners(path: PathSample, spec: SystemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Increments ``(dw_tilde, dw_hat)`` with ``dw_hat = Psi dy`` and
    ``dw_tilde = Psi Theta dw``, both shape ``(steps, m)``."""
    psi, Th = psi_along_path(path, spec)
    dw_hat = np.einsum("kij,kj->ki", psi, path.dy)
    dw_tilde = np.einsum("kij,kj->ki", psi @ Th, path.w)
    return dw_tilde, dw_hat


def beta_along_path(path: PathSample, spec: SystemSpec) -> np.ndarray:
    """``beta_k(x_k) = Psi_k B(t_k, z_k)`` on the true path, shape ``(steps, m)``."""
    psi, _ = psi_along_path(path, spec)
    B = np.stack([np.asarray(spec.B(k * path.dt, path.z[k]), dtype=float) for k in range(path.steps)])
    return np.einsum("kij,kj->ki", psi, B)


def likelihood_rho(path: PathSample, spec: SystemSpec) -> np.ndarray:
    """Girsanov density ``rho_t`` at every mesh point (left-point sums)."""
    dw_tilde, _ = derived_wieners(path, spec)
    beta = beta_along_path(path, spec)
    incr = -np.sum(beta * dw_tilde, axis=1) - 0.5 * np.sum(beta**2, axis=1) * path.dt
    return np.exp(np.concatenate([[0.0], np.cumsum(incr)]))


def write_path_csv(path: PathSample, dest: str | Path) -> None:
    m = path.z.shape[1] - path.d
    header = ["t"] + [f"x_{i + 1}" for i in range(path.d)] + [f"y_{i + 1}" for i in range(m)]
    data = np.column_stack([path.times, path.z])
    with open(dest, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def write_path_binary(path: PathSample, dest: str | Path) -> None:
    d1, d2 = path.z.shape[1], path.w.shape[1]
    with open(dest, "wb") as fh:
        fh.write(PATH_MAGIC)
        fh.write(struct.pack("<5q", path.steps, path.d, d1, d2, path.seed))
        fh.write(struct.pack("<d", path.dt))
        fh.write(np.ascontiguousarray(path.w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(path.z, dtype="<f8").tobytes())


def read_path_binary(src: str | Path) -> PathSample:
    raw = Path(src).read_bytes()
    if raw[:8] != PATH_MAGIC:
        raise ConfigError(f"{src}: not a path file")
    steps, d, d1, d2, seed = struct.unpack_from("<5q", raw, 8)
    (dt,) = struct.unpack_from("<d", raw, 48)
    off = 56
    w = np.frombuffer(raw, dtype="<f8", count=steps * d2, offset=off).reshape(steps, d2)
    off += 8 * steps * d2
    z = np.frombuffer(raw, dtype="<f8", count=(steps + 1) * d1, offset=off).reshape(steps + 1, d1)
    return PathSample(dt, w.astype(float), z.astype(float), d, seed)

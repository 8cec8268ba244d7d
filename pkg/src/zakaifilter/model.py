"""Partially observable diffusion model and its observation-conditioned fields.

The system is

    dx = b(t, z) dt + theta(t, z) dw,
    dy = B(t, z) dt + Theta(t, y) dw,

with ``z = (x, y)``, ``x`` of dimension ``d``, ``y`` of dimension
``m = d1 - d`` and ``w`` a ``d2``-dimensional Wiener process. All coefficient
callables are vectorized over leading axes of ``z`` (or ``y`` for Theta).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .densities import InitialDensity
from .errors import ConfigError, EvaluationError, QuadratureError, SingularObservationNoise
from .families import active_inputs
from .grid import GridSpec

PSI_EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class SystemSpec:
    d: int
    d1: int
    d2: int
    b: Callable
    theta: Callable
    B: Callable
    Theta: Callable
    K: float
    delta: float
    T: float
    pi0: InitialDensity
    y0: np.ndarray = None
    bound: float = np.inf
    name: str = "system"

    def __post_init__(self):
        if self.d < 1 or self.d1 <= self.d or self.d2 < self.d1:
            raise ConfigError(
                f"dimensions need d >= 1, d1 > d, d2 >= d1; got d={self.d}, d1={self.d1}, d2={self.d2}"
            )
        for name in ("K", "delta", "T"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"system.{name} must be positive")
        if self.pi0.d != self.d:
            raise ConfigError(f"pi0 has dimension {self.pi0.d}, expected {self.d}")
        y0 = np.zeros(self.m) if self.y0 is None else np.atleast_1d(np.asarray(self.y0, float))
        if y0.shape != (self.m,):
            raise ConfigError(f"y0: expected shape ({self.m},), got {y0.shape}")
        object.__setattr__(self, "y0", y0)

    @property
    def m(self) -> int:
        """Observation dimension ``d1 - d``."""
        return self.d1 - self.d

    def Theta_z(self, t, z):
        """Theta as a function of the full state; reads only the y block."""
        return self.Theta(t, np.asarray(z, dtype=float)[..., self.d :])

    def btilde(self, t, z):
        return np.concatenate([self.b(t, z), self.B(t, z)], axis=-1)

    def thetatilde(self, t, z):
        return np.concatenate([self.theta(t, z), self.Theta_z(t, z)], axis=-2)


def inverse_sqrt_spd(M: np.ndarray, floor: float = PSI_EIG_FLOOR) -> np.ndarray:
    """Symmetric ``M^{-1/2}`` through an eigendecomposition."""
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    lam, V = np.linalg.eigh(M)
    if np.any(lam < floor):
        raise SingularObservationNoise(
            f"Theta Theta^T has eigenvalue {lam.min():.3e} below {floor:g}"
        )
    return (V * lam[..., None, :] ** -0.5) @ np.swapaxes(V, -1, -2)


def compute_psi(spec: SystemSpec, t: float, y) -> np.ndarray:
    """``Psi = (Theta Theta^*)^{-1/2}`` at ``(t, y)``."""
    Th = np.asarray(spec.Theta(t, np.asarray(y, dtype=float)), dtype=float)
    if not np.all(np.isfinite(Th)):
        raise EvaluationError("Theta returned non-finite values")
    return inverse_sqrt_spd(Th @ Th.T)


@dataclass(frozen=True)
class ConditionedCoefficients:
    """Coefficient fields at fixed ``(t, y_t)``, sampled on a grid.

    Field arrays have shape ``grid.shape + component_shape``.
    """

    t: float
    y: np.ndarray
    a: np.ndarray  # (..., d, d)
    b_vec: np.ndarray  # (..., d)
    sigma: np.ndarray  # (..., d, m)
    beta: np.ndarray  # (..., m)
    psi: np.ndarray  # (m, m)
    div_a: np.ndarray  # (..., d)
    div_sigma: np.ndarray  # (..., m)

    def same_fields(self, other: ConditionedCoefficients | None) -> bool:
        if other is None:
            return False
        names = ("a", "b_vec", "sigma", "beta", "psi", "div_a", "div_sigma")
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)


def _grid_divergence(field: np.ndarray, grid: GridSpec) -> np.ndarray:
    """``sum_i D_i F^{i...}``: central differences inside, one-sided at edges."""
    d = grid.d
    out = np.zeros(field.shape[:d] + field.shape[d + 1 :])
    for i in range(d):
        if grid.nodes[i] < 2:
            continue
        comp = field[(slice(None),) * d + (i,)]
        out += np.gradient(comp, grid.h[i], axis=i, edge_order=1)
    return out


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"{name} returned non-finite values")
    return arr


def condition_coefficients(spec: SystemSpec, t: float, y, grid: GridSpec) -> ConditionedCoefficients:
    if grid.d != spec.d:
        raise ConfigError(f"grid dimension {grid.d} does not match signal dimension {spec.d}")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    pts = grid.points
    z = np.concatenate([pts, np.broadcast_to(y, (pts.shape[0], spec.m))], axis=1)
    shape = grid.shape

    th = _check_finite("theta", spec.theta(t, z))  # (N, d, d2)
    bx = _check_finite("b", spec.b(t, z))  # (N, d)
    Bz = _check_finite("B", spec.B(t, z))  # (N, m)
    Th = _check_finite("Theta", spec.Theta(t, y))  # (m, d2)
    psi = inverse_sqrt_spd(Th @ Th.T)

    a = 0.5 * th @ np.swapaxes(th, -1, -2)
    sigma = th @ (Th.T @ psi)
    beta = Bz @ psi.T

    a = a.reshape(shape + (spec.d, spec.d))
    sigma = sigma.reshape(shape + (spec.d, spec.m))
    return ConditionedCoefficients(
        t=float(t),
        y=y,
        a=a,
        b_vec=bx.reshape(shape + (spec.d,)),
        sigma=sigma,
        beta=beta.reshape(shape + (spec.m,)),
        psi=psi,
        div_a=_grid_divergence(a, grid),
        div_sigma=_grid_divergence(sigma, grid),
    )


@dataclass
class AssumptionReport:
    lipschitz_estimate: dict[str, float]
    max_abs: dict[str, float]
    min_eigen_atilde: float
    psi_norm_bound: float
    projector_bound: float
    K: float
    delta: float
    tolerance: float
    pass_lipschitz: bool = field(init=False)
    pass_bounded: bool = field(init=False)
    pass_nondegenerate: bool = field(init=False)
    pass_psi: bool = field(init=False)
    pass_projector: bool = field(init=False)
    bound: float = np.inf

    def __post_init__(self):
        tol = self.tolerance
        self.pass_lipschitz = all(v <= self.K + tol for v in self.lipschitz_estimate.values())
        self.pass_bounded = all(v <= self.bound for v in self.max_abs.values())
        self.pass_nondegenerate = self.min_eigen_atilde >= self.delta - tol
        self.pass_psi = self.psi_norm_bound <= 1.0 / self.delta + tol
        self.pass_projector = self.projector_bound >= self.delta - tol

    @property
    def passed(self) -> bool:
        return (
            self.pass_lipschitz
            and self.pass_bounded
            and self.pass_nondegenerate
            and self.pass_psi
            and self.pass_projector
        )


def _lipschitz_quotient(fn, t, z1, z2) -> float:
    f1 = np.asarray(fn(t, z1), dtype=float)
    f2 = np.asarray(fn(t, z2), dtype=float)
    df = np.sqrt(np.sum((f1 - f2).reshape(len(z1), -1) ** 2, axis=1))
    dz = np.linalg.norm(z1 - z2, axis=1)
    ok = dz > 0
    return float(np.max(df[ok] / dz[ok])) if np.any(ok) else 0.0


def verify_assumptions(
    spec: SystemSpec,
    box,
    n_samples: int = 2000,
    seed: int = 0,
    tolerance: float = 1e-9,
) -> AssumptionReport:
    """Randomized check of Lipschitz, boundedness and nondegeneracy conditions.

    ``box`` is a ``(d1, 2)`` array of lower/upper bounds for ``z``. Lipschitz
    constants (Frobenius norm) are the largest difference quotients over
    random far pairs and over close pairs at distance ``1e-3 * diam(box)``.
    """
    box = np.asarray(box, dtype=float)
    if box.shape != (spec.d1, 2) or np.any(box[:, 1] < box[:, 0]):
        raise ConfigError(f"box must be a ({spec.d1}, 2) array of [low, high] rows")
    if n_samples < 2:
        raise ConfigError("n_samples must be at least 2")
    rng = np.random.default_rng(seed)
    lo, hi = box[:, 0], box[:, 1]
    z = rng.uniform(lo, hi, size=(n_samples, spec.d1))
    t = float(rng.uniform(0.0, spec.T))
    diam = float(np.linalg.norm(hi - lo)) or 1.0
    step = rng.standard_normal((n_samples, spec.d1))
    step *= 1e-3 * diam / np.linalg.norm(step, axis=1, keepdims=True)
    z_near = z + step
    z_far = np.roll(z, 1, axis=0)

    coeffs = {"b": spec.b, "theta": spec.theta, "B": spec.B, "Theta": spec.Theta_z}
    lip, max_abs = {}, {}
    for name, fn in coeffs.items():
        lip[name] = max(
            _lipschitz_quotient(fn, t, z, z_far), _lipschitz_quotient(fn, t, z, z_near)
        )
        vals = np.asarray(fn(t, z), dtype=float)
        max_abs[name] = float(np.max(np.abs(vals))) if np.all(np.isfinite(vals)) else np.inf

    tt = spec.thetatilde(t, z)  # (N, d1, d2)
    atilde = 0.5 * tt @ np.swapaxes(tt, -1, -2)
    min_eig = float(np.min(np.linalg.eigvalsh(atilde)))

    th = tt[:, : spec.d, :]
    Th = tt[:, spec.d :, :]
    G = Th @ np.swapaxes(Th, -1, -2)
    g_eigs = np.linalg.eigvalsh(G)
    if np.min(g_eigs) < PSI_EIG_FLOOR:
        psi_norm, proj = np.inf, -np.inf
    else:
        psi_norm = float(np.max(g_eigs ** -0.5))
        # Theta^* Psi^2 Theta = Theta^* (Theta Theta^*)^{-1} Theta
        P_row = np.swapaxes(Th, -1, -2) @ np.linalg.solve(G, Th)
        Q = np.eye(spec.d2) - P_row
        form = th @ Q @ np.swapaxes(th, -1, -2)
        proj = float(np.min(np.linalg.eigvalsh(0.5 * (form + np.swapaxes(form, -1, -2)))))
    return AssumptionReport(
        lipschitz_estimate=lip,
        max_abs=max_abs,
        min_eigen_atilde=min_eig,
        psi_norm_bound=psi_norm,
        projector_bound=proj,
        K=spec.K,
        delta=spec.delta,
        tolerance=tolerance,
        bound=spec.bound,
    )


def _bump(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


_BUMP_MASS = None


def bump_mass() -> float:
    """Integral of the unnormalized 1-d bump over [-1, 1]."""
    global _BUMP_MASS
    if _BUMP_MASS is None:
        _BUMP_MASS = quad(lambda s: float(_bump(s)), -1.0, 1.0, epsabs=1e-15, epsrel=1e-13, limit=200)[0]
    return _BUMP_MASS


def mollifier_density(u) -> np.ndarray:
    """Normalized product bump on the unit cube, shape ``(..., k) -> (...)``."""
    return np.prod(_bump(u) / bump_mass(), axis=-1)


def mollifier_rule(n_nodes: int = 48) -> tuple[np.ndarray, np.ndarray]:
    """1-d Gauss-Legendre nodes and normalized bump weights."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    wz = w * _bump(x) / bump_mass()
    err = abs(wz.sum() - 1.0)
    if err > 1e-8:
        raise QuadratureError(f"mollifier quadrature off by {err:.2e} with {n_nodes} nodes")
    return x, wz


class MollifiedTheta:
    """``theta^(n)(t, z) = int zeta(u) theta(t, z - u/n) du``.

    Integrates only over coordinates the base coefficient reads; along the
    others the product mollifier integrates to one exactly.
    """

    def __init__(self, base: Callable, n: int, d1: int, n_nodes: int = 48, chunk: int = 1 << 21):
        if n < 1:
            raise ConfigError("mollification index n must be >= 1")
        self.base = base
        self.n = int(n)
        self.d1 = d1
        self.chunk = chunk
        mask = active_inputs(base, d1)
        self.active = np.flatnonzero(mask)
        x, w = mollifier_rule(n_nodes)
        k = len(self.active)
        if k == 0:
            self.offsets = np.zeros((1, d1))
            self.weights = np.ones(1)
        else:
            grids = np.meshgrid(*([x] * k), indexing="ij")
            wgrids = np.meshgrid(*([w] * k), indexing="ij")
            self.offsets = np.zeros((grids[0].size, d1))
            for col, g in zip(self.active, grids):
                self.offsets[:, col] = g.ravel()
            self.weights = np.prod([g.ravel() for g in wgrids], axis=0)

    def active_inputs(self):
        mask = np.zeros(self.d1, dtype=bool)
        mask[self.active] = True
        return mask

    def __call__(self, t, z):
        z = np.asarray(z, dtype=float)
        lead = z.shape[:-1]
        flat = z.reshape(-1, self.d1)
        q = len(self.weights)
        step = max(1, self.chunk // q)
        parts = []
        for start in range(0, flat.shape[0], step):
            block = flat[start : start + step]
            shifted = block[:, None, :] - self.offsets[None, :, :] / self.n
            vals = np.asarray(self.base(t, shifted), dtype=float)
            parts.append(np.tensordot(self.weights, vals, axes=([0], [1])))
        out = np.concatenate(parts, axis=0) if parts else np.zeros((0,))
        return out.reshape(lead + out.shape[1:])


def mollify_theta(spec: SystemSpec, n: int, n_nodes: int = 48) -> SystemSpec:
    """Copy of ``spec`` with theta replaced by its mollification at scale ``1/n``."""
    return dataclasses.replace(
        spec,
        theta=MollifiedTheta(spec.theta, n, spec.d1, n_nodes=n_nodes),
        name=f"{spec.name}-mollified-{n}",
    )

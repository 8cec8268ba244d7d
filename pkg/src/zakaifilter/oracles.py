"""Reference filters used as ground truth for the Zakai solver.

Two oracles are provided: the Kalman-Bucy filter for linear-Gaussian systems
with independent signal and observation noise, and a bootstrap particle filter
for general systems (cross terms included). A Gaussian kernel density estimate
turns a particle cloud into a grid field for L1 comparison.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import erf

from .densities import GaussianDensity
from .errors import ConfigError, DegeneracyError, GridMismatch, RiccatiBlowup
from .families import Constant, FamilySum, Linear, active_inputs
from .grid import GridSpec
from .model import SystemSpec
from .sde_sim import PathSample, psi_along_path
from .zakai import DensityField

MIN_PARTICLES = 100
MIN_ESS = 10.0


# --------------------------------------------------------------------------- Kalman-Bucy


@dataclass(frozen=True)
class LinearGaussianSpec:
    """``dx = (A x + a0) dt + theta dw_s``, ``dy = H x dt + Theta dw_o``.

    ``theta`` and ``Theta`` act on disjoint Wiener blocks, so the full
    ``d2 = theta.shape[1] + Theta.shape[1]``.
    """

    A: np.ndarray
    a0: np.ndarray
    H: np.ndarray
    theta_const: np.ndarray
    Theta_const: np.ndarray
    m0: np.ndarray
    P0: np.ndarray
    T: float = 1.0
    K: float = 2.0
    delta: float = 0.5

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d = A.shape[0]
        if A.shape != (d, d):
            raise ConfigError(f"A: expected a square matrix, got shape {A.shape}")
        a0 = np.broadcast_to(np.asarray(self.a0, dtype=float), (d,)).copy()
        H = np.asarray(self.H, dtype=float).reshape(-1, d)
        th = np.asarray(self.theta_const, dtype=float).reshape(d, -1)
        Th = np.asarray(self.Theta_const, dtype=float).reshape(H.shape[0], -1)
        m0 = np.broadcast_to(np.asarray(self.m0, dtype=float), (d,)).copy()
        P0 = np.asarray(self.P0, dtype=float).reshape(d, d)
        if np.linalg.matrix_rank(Th @ Th.T) < Th.shape[0]:
            raise ConfigError("Theta_const Theta_const* must be invertible")
        for name, val in (("A", A), ("a0", a0), ("H", H), ("theta_const", th),
                          ("Theta_const", Th), ("m0", m0), ("P0", P0)):
            object.__setattr__(self, name, val)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def d2(self) -> int:
        return self.theta_const.shape[1] + self.Theta_const.shape[1]

    def blocks(self) -> tuple[np.ndarray, np.ndarray]:
        """Full ``theta`` (d x d2) and ``Theta`` (m x d2) with disjoint columns."""
        p = self.theta_const.shape[1]
        theta = np.zeros((self.d, self.d2))
        Theta = np.zeros((self.m, self.d2))
        theta[:, :p] = self.theta_const
        Theta[:, p:] = self.Theta_const
        return theta, Theta

    def to_system_spec(self, name: str = "linear_gaussian") -> SystemSpec:
        d, m = self.d, self.m
        d1 = d + m
        theta, Theta = self.blocks()
        A_full = np.hstack([self.A, np.zeros((d, m))])
        H_full = np.hstack([self.H, np.zeros((m, m))])
        return SystemSpec(
            d=d, d1=d1, d2=self.d2,
            b=FamilySum([Linear(d1, (d,), A_full, self.a0)], d1, (d,)),
            theta=FamilySum([Constant(d1, (d, self.d2), theta)], d1, (d, self.d2)),
            B=FamilySum([Linear(d1, (m,), H_full)], d1, (m,)),
            Theta=FamilySum([Constant(m, (m, self.d2), Theta)], m, (m, self.d2)),
            K=self.K, delta=self.delta, T=self.T,
            pi0=GaussianDensity(self.m0, self.P0),
            name=name,
        )

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(), "a0": self.a0.tolist(), "H": self.H.tolist(),
            "theta": self.theta_const.tolist(), "Theta": self.Theta_const.tolist(),
            "m0": self.m0.tolist(), "P0": self.P0.tolist(),
            "T": self.T, "K": self.K, "delta": self.delta,
        }


def kalman_bucy(lin: LinearGaussianSpec, path: PathSample,
                dt: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Euler discretization of the Kalman-Bucy mean SDE and Riccati ODE.

    Parameters
    ----------
    lin : LinearGaussianSpec
    path : PathSample
        Only the observation block ``y`` is read.
    dt : float, optional
        Filter step; must be a multiple of ``path.dt``. Defaults to ``path.dt``.

    Returns
    -------
    means : ndarray, shape (K + 1, d)
    covs : ndarray, shape (K + 1, d, d)
    """
    if dt is None:
        obs = path
    else:
        stride = int(round(dt / path.dt))
        if stride < 1 or abs(stride * path.dt - dt) > 1e-12 * dt:
            raise ConfigError(f"dt={dt} is not a multiple of the path step {path.dt}")
        obs = path.coarsen(stride)
    h = obs.dt
    dy = obs.dy
    K = obs.steps
    d = lin.d
    Rinv = np.linalg.inv(lin.Theta_const @ lin.Theta_const.T)
    Q = lin.theta_const @ lin.theta_const.T
    A, H, a0 = lin.A, lin.H, lin.a0

    means = np.empty((K + 1, d))
    covs = np.empty((K + 1, d, d))
    m, P = lin.m0.copy(), lin.P0.copy()
    means[0], covs[0] = m, P
    for k in range(K):
        gain = P @ H.T @ Rinv
        m = m + (A @ m + a0) * h + gain @ (dy[k] - H @ m * h)
        P = P + (A @ P + P @ A.T + Q - gain @ H @ P) * h
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)) or np.linalg.eigvalsh(P).min() <= 0:
            raise RiccatiBlowup(f"covariance lost positive definiteness at step {k + 1}")
        means[k + 1], covs[k + 1] = m, P
    return means, covs


def stationary_riccati_scalar(A: float, H: float, q: float, r: float) -> float:
    """Positive root of ``2 A P + q - H^2 P^2 / r = 0``."""
    if H == 0:
        if A >= 0:
            raise ValueError("no stationary variance without observations and with A >= 0")
        return -q / (2 * A)
    c = H * H / r
    return (A + np.sqrt(A * A + c * q)) / c


# --------------------------------------------------------------------------- particles


@dataclass(frozen=True)
class ParticleEnsemble:
    t: float
    positions: np.ndarray  # (N, d)
    log_weights: np.ndarray  # (N,) normalized: logsumexp == 0
    ess: float = field(init=False)

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        lw = lw - _logsumexp(lw)
        object.__setattr__(self, "log_weights", lw)
        w = np.exp(lw)
        object.__setattr__(self, "ess", float(1.0 / np.sum(w * w)))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.positions

    def cov(self) -> np.ndarray:
        dx = self.positions - self.mean()
        return (self.weights[:, None] * dx).T @ dx


@dataclass
class ParticleRun:
    """Ensembles at recorded steps plus per-step weighted moments.

    Behaves as a sequence of :class:`ParticleEnsemble`.
    """

    times: np.ndarray  # (K + 1,)
    means: np.ndarray  # (K + 1, d)
    covs: np.ndarray  # (K + 1, d, d)
    ess: np.ndarray  # (K + 1,) before any resampling at that step
    resampled: np.ndarray  # (K + 1,) bool
    record_index: np.ndarray
    ensembles: list[ParticleEnsemble]

    def __len__(self) -> int:
        return len(self.ensembles)

    def __getitem__(self, i: int) -> ParticleEnsemble:
        return self.ensembles[i]

    def __iter__(self):
        return iter(self.ensembles)

    @property
    def final(self) -> ParticleEnsemble:
        return self.ensembles[-1]


def _logsumexp(a: np.ndarray) -> float:
    top = float(np.max(a))
    return top + float(np.log(np.sum(np.exp(a - top))))


def systematic_resample(weights: np.ndarray, u: float) -> np.ndarray:
    """Indices for systematic resampling with a single uniform ``u`` in [0, 1)."""
    n = weights.shape[0]
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, (u + np.arange(n)) / n, side="right")


def _thread_count(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("ZAKAI_THREADS", "1") or 1)
    return max(1, int(threads))


def _hidden_basis(psi: np.ndarray, Th: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``Theta* Psi`` and an orthonormal basis of the kernel of ``Theta``.

    ``I - Theta* Psi^2 Theta`` is the projector onto that kernel, so
    ``theta Q dv`` has the law of ``theta U dxi`` with ``dxi`` of rank-many
    coordinates.
    """
    proj = Th.T @ psi
    Q = np.eye(Th.shape[1]) - proj @ proj.T
    vals, vecs = np.linalg.eigh(0.5 * (Q + Q.T))
    return proj, vecs[:, vals > 0.5]


def _evaluate(fn, t, z, shape, constant):
    if constant:
        return np.asarray(fn(t, z[:1]), dtype=float).reshape((1,) + shape)
    return np.asarray(fn(t, z), dtype=float).reshape((z.shape[0],) + shape)


def _propagate(spec, const, t, y, dt, dw_hat, proj, U, psi, x, dxi, out, logw_incr):
    n = x.shape[0]
    z = np.concatenate([x, np.broadcast_to(y, (n, spec.m))], axis=1)
    b = _evaluate(spec.b, t, z, (spec.d,), const["b"])
    theta = _evaluate(spec.theta, t, z, (spec.d, spec.d2), const["theta"])
    B = _evaluate(spec.B, t, z, (spec.m,), const["B"])
    beta = B @ psi.T
    sigma = theta @ proj  # (n or 1, d, m)
    hidden = theta @ U
    if const["theta"]:
        drift = b - beta @ sigma[0].T
        noise = sigma[0] @ dw_hat + dxi @ hidden[0].T
    else:
        drift = b - np.einsum("nij,nj->ni", sigma, beta)
        noise = sigma @ dw_hat + np.einsum("nij,nj->ni", hidden, dxi)
    out[:] = x + drift * dt + noise
    logw_incr[:] = beta @ dw_hat - 0.5 * np.sum(beta * beta, axis=1) * dt


def particle_filter(
    spec: SystemSpec,
    path: PathSample,
    N: int,
    seed: int,
    *,
    stride: int = 1,
    record_every: int | None = None,
    resample_fraction: float = 0.5,
    threads: int | None = None,
    check: bool = True,
) -> ParticleRun:
    """Bootstrap particle filter along the observations of ``path``.

    Particles follow the signal dynamics conditioned on the observation noise:
    ``x += (b - sigma beta) dt + sigma dw_hat + theta Q dv`` where ``Q`` projects
    onto the part of the Wiener process invisible to ``y`` and ``dv`` is fresh
    noise (drawn only along the range of ``Q``). Log-weights gain ``beta . dw_hat - |beta|^2 dt / 2``. Systematic
    resampling is triggered when the effective sample size drops below
    ``resample_fraction * N``.

    ``record_every=None`` keeps only the initial and final ensembles;
    ``check=False`` lifts the particle-count and degeneracy checks (tests only).
    """
    if check and N < MIN_PARTICLES:
        raise ConfigError(f"particle count N={N} below the minimum {MIN_PARTICLES}")
    obs = path.coarsen(stride)
    K, dt = obs.steps, obs.dt
    psi_all, Th_all = psi_along_path(obs, spec)
    dw_hat = np.einsum("kij,kj->ki", psi_all, obs.dy)
    rng = np.random.default_rng(seed)
    x = spec.pi0.sample(rng, N).reshape(N, spec.d)
    logw = np.zeros(N)
    const = {name: not active_inputs(getattr(spec, name), spec.d1).any() for name in ("b", "theta", "B")}
    n_threads = _thread_count(threads)
    bounds = np.linspace(0, N, n_threads + 1).astype(int)
    chunks = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]

    keep = {0, K} if record_every is None else set(range(0, K + 1, record_every)) | {K}
    means = np.empty((K + 1, spec.d))
    covs = np.empty((K + 1, spec.d, spec.d))
    ess = np.empty(K + 1)
    resampled = np.zeros(K + 1, dtype=bool)
    ensembles, rec = [], []
    x_new = np.empty_like(x)
    incr = np.empty(N)
    pool = ThreadPoolExecutor(n_threads) if n_threads > 1 else None
    try:
        for k in range(K + 1):
            w = np.exp(logw - _logsumexp(logw))
            ess[k] = 1.0 / np.sum(w * w)
            means[k] = w @ x
            dx = x - means[k]
            covs[k] = (w[:, None] * dx).T @ dx
            if k in keep:
                ensembles.append(ParticleEnsemble(k * dt, x.copy(), logw.copy()))
                rec.append(k)
            if k == K:
                break
            if ess[k] < resample_fraction * N:
                idx = systematic_resample(w, rng.uniform())
                x = x[idx]
                logw = np.zeros(N)
                resampled[k] = True
                if check and len(np.unique(idx)) < MIN_ESS:
                    raise DegeneracyError(f"ESS below {MIN_ESS:g} after resampling at step {k}")
            # draws in the main thread keep results independent of the thread count
            proj, U = _hidden_basis(psi_all[k], Th_all[k])
            dxi = rng.standard_normal((N, U.shape[1])) * np.sqrt(dt)
            common = (spec, const, k * dt, obs.y[k], dt, dw_hat[k], proj, U, psi_all[k])
            if pool is None:
                _propagate(*common, x, dxi, x_new, incr)
            else:
                futs = [
                    pool.submit(_propagate, *common, x[c], dxi[c], x_new[c], incr[c])
                    for c in chunks
                ]
                for f in futs:
                    f.result()
            x, x_new = x_new, x
            logw = logw + incr
            if not np.all(np.isfinite(x)):
                raise DegeneracyError(f"non-finite particle positions at step {k + 1}")
    finally:
        if pool is not None:
            pool.shutdown()
    return ParticleRun(
        times=dt * np.arange(K + 1),
        means=means,
        covs=covs,
        ess=ess,
        resampled=resampled,
        record_index=np.asarray(rec, dtype=int),
        ensembles=ensembles,
    )


# --------------------------------------------------------------------------- KDE and distances


def silverman_bandwidth(positions: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Per-axis Silverman bandwidth with weighted scale and ``n = ESS``.

    In one dimension ``0.9 min(sd, IQR / 1.34) n^(-1/5)``; for ``d > 1`` the
    normal-reference rule ``sd (4 / ((d + 2) n))^(1 / (d + 4))``.
    """
    x = np.asarray(positions, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float) / np.sum(weights)
    n_eff = 1.0 / np.sum(w * w)
    mean = w @ x
    sd = np.sqrt(w @ (x - mean) ** 2)
    if d == 1:
        order = np.argsort(x[:, 0])
        cdf = np.cumsum(w[order])
        q1, q3 = np.interp([0.25, 0.75], cdf, x[order, 0])
        spread = min(sd[0], (q3 - q1) / 1.34) if q3 > q1 else sd[0]
        return np.array([0.9 * spread * n_eff ** (-0.2)])
    return sd * (4.0 / ((d + 2) * n_eff)) ** (1.0 / (d + 4))


def kde_on_grid(ensemble: ParticleEnsemble, grid: GridSpec,
                bandwidth: np.ndarray | float | None = None) -> DensityField:
    """Gaussian KDE of a weighted cloud evaluated at the grid nodes.

    Weights are spread to the two nearest nodes per axis (linear binning), then
    smoothed with a Gaussian filter of standard deviation ``bandwidth / h``;
    the result is renormalized to unit trapezoid mass. Mass falling outside
    the grid box is dropped before renormalizing.
    """
    x = ensemble.positions.reshape(-1, grid.d)
    w = ensemble.weights
    bw = silverman_bandwidth(x, w) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, dtype=float), (grid.d,))
    lower = np.asarray(grid.lower)
    h = np.asarray(grid.h)
    nodes = np.asarray(grid.nodes)
    s = (x - lower) / h
    inside = np.all((s >= 0) & (s <= nodes - 1), axis=1)
    s, w = s[inside], w[inside]
    base = np.minimum(np.floor(s).astype(int), nodes - 2)
    frac = s - base
    counts = np.zeros(grid.shape)
    for corner in range(2 ** grid.d):
        bits = [(corner >> i) & 1 for i in range(grid.d)]
        wc = w.copy()
        idx = []
        for i, bit in enumerate(bits):
            wc *= frac[:, i] if bit else 1.0 - frac[:, i]
            idx.append(base[:, i] + bit)
        np.add.at(counts, tuple(idx), wc)
    smooth = ndimage.gaussian_filter(counts, sigma=tuple(bw / h), mode="constant", truncate=6.0)
    smooth = np.maximum(smooth, 0.0)
    mass = grid.integrate(smooth)
    if not mass > 0:
        raise DegeneracyError("no particle mass inside the grid box")
    return DensityField(smooth / mass, grid)


def density_distance(a: DensityField | ParticleEnsemble, b: DensityField | ParticleEnsemble) -> float:
    """L1 distance by trapezoid quadrature of ``|A - B|``.

    A particle ensemble is first turned into a field on the other argument's
    grid by :func:`kde_on_grid`.
    """
    if isinstance(a, ParticleEnsemble) and isinstance(b, ParticleEnsemble):
        raise GridMismatch("at least one argument must be a grid field")
    if isinstance(a, ParticleEnsemble):
        a = kde_on_grid(a, b.grid)
    if isinstance(b, ParticleEnsemble):
        b = kde_on_grid(b, a.grid)
    if a.grid != b.grid:
        raise GridMismatch(f"grids differ: {a.grid.to_dict()} vs {b.grid.to_dict()}")
    return a.grid.integrate(np.abs(a.values - b.values))


def gaussian_l1_shift(shift: float, sd: float = 1.0) -> float:
    """Closed-form ``||N(0, sd^2) - N(shift, sd^2)||_1 = 2 (2 Phi(|shift| / (2 sd)) - 1)``."""
    return float(2.0 * erf(abs(shift) / (2.0 * np.sqrt(2.0) * sd)))

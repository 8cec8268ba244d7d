"""Finite-volume solver for the divergence-form Zakai equation.

The unnormalized density ``u`` evolves by

    du = L* u dt + sum_k Lambda_k* u dw_hat^k,
    L* u = D_j (a^{ij} D_i u + (D_i a^{ij} - b^j) u),
    Lambda_k* u = -sigma^{ik} D_i u + (beta^k - D_i sigma^{ik}) u,

with ``dw_hat = Psi dy``. One step is a Lie splitting: an explicit
stochastic update followed by an implicit deterministic solve. The stochastic
update is Euler by default; the optional Milstein variant adds
``1/2 sum_kl Lambda_k* Lambda_l* u (dw_hat^k dw_hat^l - delta_kl dt)``, which
is the full Milstein term for one observation channel and drops the Levy
areas otherwise.

Density binary layout (little-endian)::

    b"ZKDENS01"
    int64   d, n_snapshots
    int64   nodes[d]
    float64 lower[d], h[d]
    repeated n_snapshots times:
        float64 t
        float64 values[prod(nodes)]   (C order)

Stream binary layout (little-endian), the per-step part of a trajectory::

    b"ZKSTRM01"
    int64   K, m, stride, n_snapshots
    float64 dt
    float64 mass[K+1], min_value[K+1], max_value[K+1]
    float64 p_beta[K+1, m], dw_hat[K, m]
    int64   snapshot_index[n_snapshots]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, ConfigError, LinearSolveError, MassCollapseError
from .grid import GridSpec
from .model import ConditionedCoefficients, SystemSpec, condition_coefficients
from .sde_sim import PathSample

MASS_FLOOR = 1e-12
SOLVE_TOL = 1e-10
DENSITY_MAGIC = b"ZKDENS01"
STREAM_MAGIC = b"ZKSTRM01"
SCHEMES = ("implicit-euler", "crank-nicolson")
TRANSPORTS = ("hybrid", "upwind", "central")
NOISE_SCHEMES = ("euler", "milstein")


@dataclass(frozen=True)
class DensityField:
    values: np.ndarray
    grid: GridSpec
    mass: float = field(init=False)
    min_value: float = field(init=False)
    max_value: float = field(init=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ConfigError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mass", self.grid.integrate(values))
        object.__setattr__(self, "min_value", float(values.min()))
        object.__setattr__(self, "max_value", float(values.max()))


@dataclass(frozen=True)
class FilterState:
    t: float
    pibar: DensityField
    normalized: DensityField = field(init=False)

    def __post_init__(self):
        mass = self.pibar.mass
        if not mass > MASS_FLOOR:
            raise MassCollapseError(f"mass {mass:.3e} at t={self.t:g}")
        object.__setattr__(self, "normalized", DensityField(self.pibar.values / mass, self.pibar.grid))

    @property
    def grid(self) -> GridSpec:
        return self.pibar.grid


# --------------------------------------------------------------------------- stencils


@dataclass(frozen=True)
class _Stencil:
    """Index structure shared by every assembly on a grid.

    ``faces[j]`` holds the (left, right) node pairs of the faces normal to
    axis ``j``; ``inv_width[j]`` the reciprocal control-volume width along
    axis ``j`` at every node. ``cdiff[i]`` is
    the centred difference along axis ``i`` (one-sided on the boundary
    layers) in COO form, and ``face_cdiff[j][i]`` its average onto the
    faces normal to ``j``.
    """

    faces: list
    inv_width: list
    cdiff: list
    face_cdiff: list
    cdiff_csr: list


def _coo(M) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    M = M.tocoo()
    return M.row, M.col, M.data


@lru_cache(maxsize=16)
def _stencil(grid: GridSpec) -> _Stencil:
    N, shape = grid.size, grid.shape
    idx = np.arange(N).reshape(shape)
    faces, cdiffs, inv_width = [], [], []
    for j in range(grid.d):
        lo = [slice(None)] * grid.d
        hi = [slice(None)] * grid.d
        lo[j] = slice(0, -1)
        hi[j] = slice(1, None)
        faces.append((idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()))
        width = grid.axis_weights(j).reshape([-1 if k == j else 1 for k in range(grid.d)])
        inv_width.append(np.broadcast_to(1.0 / width, shape).ravel().copy())

        n, hj = grid.nodes[j], grid.h[j]
        d1 = np.zeros((n, n))
        d1[np.arange(1, n - 1), np.arange(2, n)] = 0.5 / hj
        d1[np.arange(1, n - 1), np.arange(0, n - 2)] = -0.5 / hj
        d1[0, :2] = [-1.0 / hj, 1.0 / hj]
        d1[-1, -2:] = [-1.0 / hj, 1.0 / hj]
        mats = [sp.identity(grid.nodes[k], format="csr") for k in range(grid.d)]
        mats[j] = sp.csr_matrix(d1)
        D = mats[0]
        for M in mats[1:]:
            D = sp.kron(D, M, format="csr")
        cdiffs.append(D.tocsr())
    face_cdiff = []
    for j in range(grid.d):
        left, right = faces[j]
        F = left.size
        rows = np.arange(F)
        avg = sp.csr_matrix(
            (np.full(2 * F, 0.5), (np.concatenate([rows, rows]), np.concatenate([left, right]))),
            shape=(F, N),
        )
        face_cdiff.append([None if i == j else _coo(avg @ cdiffs[i]) for i in range(grid.d)])
    return _Stencil(faces, inv_width, [_coo(D) for D in cdiffs], face_cdiff, cdiffs)


def centered_gradient_matrices(grid: GridSpec) -> list[sp.csr_matrix]:
    """Sparse centred-difference matrices, one per axis."""
    return list(_stencil(grid).cdiff_csr)


def assemble_deterministic_operator(
    coeffs: ConditionedCoefficients, grid: GridSpec, transport: str = "hybrid"
) -> sp.csr_matrix:
    """Flux-form discretization of ``L*`` with zero-flux boundary faces.

    Face fluxes are ``a_face . grad u + c_face u_face`` with
    ``c = div_a - b``. ``transport`` picks ``u_face``: ``central`` averages,
    ``upwind`` takes the upstream node, ``hybrid`` averages wherever the cell
    Peclet number ``|c| h / a_jj`` is at most 2 (the M-matrix limit) and
    upwinds elsewhere. A face flux leaves its left node and enters its right
    node, each divided by the node's control-volume width along the face normal.
    """
    if transport not in TRANSPORTS:
        raise ConfigError(f"transport must be one of {TRANSPORTS}")
    st = _stencil(grid)
    N, d = grid.size, grid.d
    a = coeffs.a.reshape(N, d, d)
    c = (coeffs.div_a - coeffs.b_vec).reshape(N, d)
    rows, cols, vals = [], [], []
    for j in range(d):
        left, right = st.faces[j]
        a_face = 0.5 * (a[left] + a[right])
        if d == 1:
            ok = a_face[:, 0, 0] > 0
        else:
            ok = np.linalg.eigvalsh(a_face).min(axis=1) > 0
        if not np.all(ok):
            raise AssemblyError(f"face-averaged diffusion not positive definite along axis {j}")
        ajj = a_face[:, j, j]
        c_face = 0.5 * (c[left, j] + c[right, j])
        if transport == "central":
            upwind = np.zeros(c_face.shape, dtype=bool)
        elif transport == "upwind":
            upwind = np.ones(c_face.shape, dtype=bool)
        else:
            upwind = np.abs(c_face) * grid.h[j] > 2.0 * ajj
        wl = np.where(upwind, (c_face < 0).astype(float), 0.5)
        wr = np.where(upwind, (c_face > 0).astype(float), 0.5)
        # flux_f = fl * u_left + fr * u_right (+ cross terms)
        fl = -ajj / grid.h[j] + c_face * wl
        fr = ajj / grid.h[j] + c_face * wr
        inv_w = st.inv_width[j]
        il, ir = inv_w[left], inv_w[right]
        rows += [left, left, right, right]
        cols += [left, right, left, right]
        vals += [fl * il, fr * il, -fl * ir, -fr * ir]
        for i in range(d):
            if i == j:
                continue
            frow, fcol, fval = st.face_cdiff[j][i]
            w = a_face[frow, i, j] * fval
            rows += [left[frow], right[frow]]
            cols += [fcol, fcol]
            vals += [w * inv_w[left[frow]], -w * inv_w[right[frow]]]
    L = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )
    return L.tocsr()


def assemble_stochastic_operator(
    coeffs: ConditionedCoefficients, grid: GridSpec, k: int
) -> sp.csr_matrix:
    """``Lambda_k*`` for channel ``k`` (0-based): centred transport plus a diagonal."""
    m = coeffs.beta.shape[-1]
    if not 0 <= k < m:
        raise ConfigError(f"channel index {k} outside 0..{m - 1}")
    st = _stencil(grid)
    N, d = grid.size, grid.d
    sigma = coeffs.sigma.reshape(N, d, m)
    diag = coeffs.beta.reshape(N, m)[:, k] - coeffs.div_sigma.reshape(N, m)[:, k]
    nodes = np.arange(N)
    rows, cols, vals = [nodes], [nodes], [diag]
    for i in range(d):
        col = sigma[:, i, k]
        if np.any(col != 0):
            r, cc, v = st.cdiff[i]
            rows.append(r)
            cols.append(cc)
            vals.append(-col[r] * v)
    S = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )
    return S.tocsr()


# --------------------------------------------------------------------------- stepping


class ZakaiStepper:
    """Applies splitting steps, reusing operators while coefficients repeat."""

    def __init__(self, grid: GridSpec, dt: float, scheme: str = "implicit-euler",
                 transport: str = "hybrid", noise: str = "euler"):
        if scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")
        if noise not in NOISE_SCHEMES:
            raise ConfigError(f"noise must be one of {NOISE_SCHEMES}")
        if dt < 0:
            raise ConfigError("dt must be non-negative")
        self.grid = grid
        self.dt = float(dt)
        self.scheme = scheme
        self.transport = transport
        self.noise = noise
        self._coeffs = None
        self._stoch = None
        self._lu = None
        self._A = None
        self._rhs_op = None

    def _prepare(self, coeffs: ConditionedCoefficients):
        if coeffs.same_fields(self._coeffs):
            return
        m = coeffs.beta.shape[-1]
        self._stoch = [assemble_stochastic_operator(coeffs, self.grid, k) for k in range(m)]
        if self.dt > 0:
            L = assemble_deterministic_operator(coeffs, self.grid, self.transport)
            I = sp.identity(self.grid.size, format="csr")
            theta = 1.0 if self.scheme == "implicit-euler" else 0.5
            self._A = (I - theta * self.dt * L).tocsc()
            self._rhs_op = None if theta == 1.0 else (I + (1 - theta) * self.dt * L).tocsr()
            try:
                self._lu = spla.splu(self._A)
            except RuntimeError as exc:
                raise LinearSolveError(f"factorization failed: {exc}") from exc
        self._coeffs = coeffs

    def _solve(self, v: np.ndarray) -> np.ndarray:
        rhs = v if self._rhs_op is None else self._rhs_op @ v
        u = self._lu.solve(rhs)
        scale = max(float(np.max(np.abs(rhs))), 1e-300)
        for _ in range(3):
            r = rhs - self._A @ u
            if np.all(np.isfinite(u)) and float(np.max(np.abs(r))) <= SOLVE_TOL * scale:
                return u
            u = u + self._lu.solve(r)
        raise LinearSolveError("implicit substep residual above tolerance after refinement")

    def advance(self, u: np.ndarray, coeffs: ConditionedCoefficients, dw_hat) -> np.ndarray:
        """One step on the flattened field ``u``; ``dw_hat = Psi dy``."""
        self._prepare(coeffs)
        inc = np.asarray(dw_hat, dtype=float).reshape(-1)
        v = u.copy()
        if self.noise == "euler":
            for k, S in enumerate(self._stoch):
                if inc[k] != 0.0:
                    v += inc[k] * (S @ u)
        else:
            Su = [S @ u for S in self._stoch]
            weights = 0.5 * (np.outer(inc, inc) - self.dt * np.eye(inc.size))
            for k, S in enumerate(self._stoch):
                v += inc[k] * Su[k] + S @ sum(weights[k, l] * Su[l] for l in range(inc.size))
        if self.dt == 0:
            return v
        return self._solve(v)


def step(state: FilterState, dt: float, dy, coeffs: ConditionedCoefficients,
         scheme: str = "implicit-euler", transport: str = "hybrid",
         noise: str = "euler") -> FilterState:
    """Advance ``state`` by one splitting step driven by the observation increment ``dy``."""
    grid = state.grid
    dw_hat = coeffs.psi @ np.atleast_1d(np.asarray(dy, dtype=float))
    stepper = ZakaiStepper(grid, dt, scheme, transport, noise)
    u = stepper.advance(state.pibar.values.ravel(), coeffs, dw_hat)
    return FilterState(state.t + dt, DensityField(u.reshape(grid.shape), grid))


def weighted_mean(state: FilterState, f) -> np.ndarray:
    """``(pibar, f) / (pibar, 1)`` for a grid array with optional trailing axes."""
    grid = state.grid
    f = np.asarray(f, dtype=float)
    wu = (grid.weights * state.pibar.values)
    num = np.tensordot(wu, f, axes=(tuple(range(grid.d)), tuple(range(grid.d))))
    return num / state.pibar.mass


def conditional_expectation(state: FilterState, f: np.ndarray | Callable) -> float:
    """``E[f(x_t) | y]`` by trapezoid quadrature; ``f`` is a grid array or a
    vectorized callable of node coordinates."""
    if callable(f):
        f = np.asarray(f(state.grid.points), dtype=float).reshape(state.grid.shape)
    return float(weighted_mean(state, f))


# --------------------------------------------------------------------------- trajectories


@dataclass(frozen=True)
class FilterTrajectory:
    grid: GridSpec
    dt: float
    stride: int
    times: np.ndarray  # (K+1,)
    mass: np.ndarray  # (K+1,)
    min_value: np.ndarray  # (K+1,)
    max_value: np.ndarray  # (K+1,)
    p_beta: np.ndarray  # (K+1, m)
    dw_hat: np.ndarray  # (K, m)
    snapshot_index: np.ndarray  # (S,) step indices of stored fields
    fields: np.ndarray  # (S, *grid.shape)

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def has_all_fields(self) -> bool:
        return len(self.snapshot_index) == len(self.times)

    def state(self, i: int) -> FilterState:
        """State at snapshot ``i`` (negative indices allowed)."""
        k = int(self.snapshot_index[i])
        return FilterState(float(self.times[k]), DensityField(self.fields[i], self.grid))

    def state_at_step(self, k: int) -> FilterState:
        hits = np.flatnonzero(self.snapshot_index == k)
        if hits.size == 0:
            raise KeyError(f"step {k} was not stored")
        return self.state(int(hits[0]))

    @property
    def negativity_ratio(self) -> float:
        """``max(0, -min pibar) / sup pibar`` over the run."""
        return float(max(0.0, -self.min_value.min()) / self.max_value.max())


def initial_field(spec: SystemSpec, grid: GridSpec) -> np.ndarray:
    values = np.asarray(spec.pi0.pdf(grid.points), dtype=float).reshape(grid.shape)
    mass = grid.integrate(values)
    if not mass > 0:
        raise ConfigError("pi0 has no mass on the grid")
    return values / mass


def solve_zakai(
    spec: SystemSpec,
    path: PathSample,
    grid: GridSpec,
    *,
    stride: int = 1,
    scheme: str = "implicit-euler",
    transport: str = "hybrid",
    noise: str = "euler",
    snapshot_every: int | None = 1,
    initial: np.ndarray | None = None,
    check_support: bool = True,
) -> FilterTrajectory:
    """Run the splitting scheme along the observations of ``path``.

    The filter sees every ``stride``-th mesh point of the path. Fields are
    stored every ``snapshot_every`` steps (``None`` keeps only the endpoints).
    ``initial`` overrides the sampled ``pi0`` (used for linearity checks).
    """
    if check_support and initial is None:
        lo, hi = spec.pi0.support()
        if not grid.contains_box(lo, hi):
            raise ConfigError("grid box does not contain the declared support of pi0")
    obs = path.coarsen(stride)
    K, dt = obs.steps, obs.dt
    u = (initial_field(spec, grid) if initial is None else np.asarray(initial, float)).ravel().copy()
    stepper = ZakaiStepper(grid, dt, scheme, transport, noise)
    m = spec.m
    times = dt * np.arange(K + 1)
    mass = np.empty(K + 1)
    vmin = np.empty(K + 1)
    vmax = np.empty(K + 1)
    p_beta = np.empty((K + 1, m))
    dw_hat = np.empty((K, m))
    if snapshot_every is None:
        keep = [0, K]
    else:
        keep = sorted(set(range(0, K + 1, snapshot_every)) | {K})
    keep_set = set(keep)
    fields = []
    wts = grid.weights.ravel()
    y = obs.y
    dy = obs.dy

    for k in range(K + 1):
        coeffs = condition_coefficients(spec, times[k], y[k], grid)
        mk = float(wts @ u)
        if not mk > MASS_FLOOR:
            raise MassCollapseError(f"mass {mk:.3e} at t={times[k]:g}")
        mass[k] = mk
        vmin[k] = u.min()
        vmax[k] = u.max()
        p_beta[k] = (wts * u) @ coeffs.beta.reshape(-1, m) / mk
        if k in keep_set:
            fields.append(u.reshape(grid.shape).copy())
        if k == K:
            break
        dw_hat[k] = coeffs.psi @ dy[k]
        u = stepper.advance(u, coeffs, dw_hat[k])

    return FilterTrajectory(
        grid=grid,
        dt=dt,
        stride=stride,
        times=times,
        mass=mass,
        min_value=vmin,
        max_value=vmax,
        p_beta=p_beta,
        dw_hat=dw_hat,
        snapshot_index=np.asarray(keep, dtype=int),
        fields=np.stack(fields),
    )


# --------------------------------------------------------------------------- snapshot IO


def write_density_binary(traj: FilterTrajectory, dest: str | Path) -> None:
    g = traj.grid
    with open(dest, "wb") as fh:
        fh.write(DENSITY_MAGIC)
        fh.write(struct.pack(f"<2q{g.d}q", g.d, len(traj.snapshot_index), *g.nodes))
        fh.write(struct.pack(f"<{2 * g.d}d", *g.lower, *g.h))
        for i, k in enumerate(traj.snapshot_index):
            fh.write(struct.pack("<d", float(traj.times[k])))
            fh.write(np.ascontiguousarray(traj.fields[i], dtype="<f8").tobytes())


def read_density_binary(src: str | Path) -> tuple[GridSpec, np.ndarray, np.ndarray]:
    """Return ``(grid, times, fields)`` from a density snapshot file."""
    raw = Path(src).read_bytes()
    if raw[:8] != DENSITY_MAGIC:
        raise ConfigError(f"{src}: not a density file")
    d, S = struct.unpack_from("<2q", raw, 8)
    off = 24
    nodes = struct.unpack_from(f"<{d}q", raw, off)
    off += 8 * d
    vals = struct.unpack_from(f"<{2 * d}d", raw, off)
    off += 16 * d
    grid = GridSpec(tuple(vals[:d]), tuple(vals[d:]), tuple(nodes))
    n = grid.size
    times = np.empty(S)
    fields = np.empty((S,) + grid.shape)
    for i in range(S):
        (times[i],) = struct.unpack_from("<d", raw, off)
        off += 8
        fields[i] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(grid.shape)
        off += 8 * n
    return grid, times, fields


def write_stream_binary(traj: FilterTrajectory, dest: str | Path) -> None:
    m = traj.p_beta.shape[1]
    with open(dest, "wb") as fh:
        fh.write(STREAM_MAGIC)
        fh.write(struct.pack("<4q", traj.steps, m, traj.stride, len(traj.snapshot_index)))
        fh.write(struct.pack("<d", traj.dt))
        for arr in (traj.mass, traj.min_value, traj.max_value, traj.p_beta, traj.dw_hat):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.snapshot_index, dtype="<i8").tobytes())


def read_trajectory(stream_src: str | Path, density_src: str | Path) -> FilterTrajectory:
    """Rebuild a trajectory from its stream and density files."""
    raw = Path(stream_src).read_bytes()
    if raw[:8] != STREAM_MAGIC:
        raise ConfigError(f"{stream_src}: not a stream file")
    K, m, stride, S = struct.unpack_from("<4q", raw, 8)
    (dt,) = struct.unpack_from("<d", raw, 40)
    off = 48

    def take(count, dtype="<f8"):
        nonlocal off
        out = np.frombuffer(raw, dtype=dtype, count=count, offset=off).copy()
        off += 8 * count
        return out

    mass, vmin, vmax = take(K + 1), take(K + 1), take(K + 1)
    p_beta = take((K + 1) * m).reshape(K + 1, m)
    dw_hat = take(K * m).reshape(K, m)
    index = take(S, "<i8").astype(int)
    grid, times, fields = read_density_binary(density_src)
    full_times = dt * np.arange(K + 1)
    if len(times) != S or not np.array_equal(times, full_times[index]):
        raise ConfigError(f"{density_src} does not belong to {stream_src}")
    return FilterTrajectory(grid, dt, int(stride), full_times, mass, vmin, vmax, p_beta,
                            dw_hat, index, fields)


def write_density_csv(field_values: np.ndarray, grid: GridSpec, dest: str | Path) -> None:
    cols = [f"x_{i + 1}" for i in range(grid.d)] + ["value"]
    data = np.column_stack([grid.points, np.asarray(field_values).ravel()])
    with open(dest, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

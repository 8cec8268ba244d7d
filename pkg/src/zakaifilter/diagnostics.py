"""Residuals and statistics for the structural identities of the filter.

Every stochastic integral is reconstructed with left-point sums, matching the
increments the solver consumed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import jsonschema
import numpy as np

from .errors import InsufficientResolution, MassCollapseError
from .model import ConditionedCoefficients, SystemSpec
from .sde_sim import PathSample, psi_along_path
from .zakai import MASS_FLOOR, FilterState, FilterTrajectory, weighted_mean

SCHEMA_VERSION = "zakaifilter.diagnostics/1"
EXPONENT_CAP = 1.5
HOLDER_LEVELS = 5


def p_beta(state: FilterState, coeffs: ConditionedCoefficients) -> np.ndarray:
    """Posterior mean of ``beta``: ``(pibar, beta) / (pibar, 1)``."""
    if not state.pibar.mass > MASS_FLOOR:
        raise MassCollapseError(f"mass {state.pibar.mass:.3e}")
    return np.atleast_1d(weighted_mean(state, coeffs.beta))


def mass_identity_residual(traj: FilterTrajectory, path: PathSample, spec: SystemSpec) -> float:
    """``sup_t |(pibar_t, 1) - RHS_t|`` for the total-mass identity.

    ``RHS_t = 1 + sum (pibar_s, beta_s) Psi_s (B(s, z_s) ds + Theta_s dw_s)``
    is summed on the native mesh of ``path`` with the true state and Wiener
    increments; the density is held at the latest filter time. Returns
    ``nan`` when the path carries no Wiener increments (observed data).
    """
    if path.w is None:
        return float("nan")
    stride = traj.stride
    if path.steps != traj.steps * stride:
        raise ValueError("trajectory was not produced from this path")
    if not traj.has_all_fields:
        raise ValueError("mass identity needs the field at every filter step")
    grid = traj.grid
    pts = grid.points
    wts = (grid.weights.ravel()[None, :] * traj.fields.reshape(len(traj.fields), -1))
    psi, Th = psi_along_path(path, spec)
    rhs = np.empty(path.steps + 1)
    rhs[0] = 1.0
    for s in range(path.steps):
        t = s * path.dt
        k = s // stride
        y = path.y[s]
        zg = np.concatenate([pts, np.broadcast_to(y, (pts.shape[0], spec.m))], axis=1)
        Bg = np.asarray(spec.B(t, zg), dtype=float)  # (N, m)
        pb = psi[s] @ (wts[k] @ Bg)  # (pibar, beta_s)
        dyn = np.asarray(spec.B(t, path.z[s]), dtype=float) * path.dt + Th[s] @ path.w[s]
        rhs[s + 1] = rhs[s] + pb @ (psi[s] @ dyn)
    return float(np.max(np.abs(traj.mass - rhs[::stride])))


def innovation_path(traj: FilterTrajectory, path: PathSample, spec: SystemSpec) -> np.ndarray:
    """Innovation increments ``Psi_k dy_k - P_k[beta] dt`` on the filter mesh."""
    obs = path.coarsen(traj.stride)
    psi, _ = psi_along_path(obs, spec)
    dw_hat = np.einsum("kij,kj->ki", psi, obs.dy)
    return dw_hat - traj.p_beta[:-1] * traj.dt


def innovation_tests(increments: np.ndarray, dt: float) -> tuple[float, float]:
    """Quadratic-variation error and mean z-score of Wiener increments."""
    inc = np.asarray(increments, dtype=float)
    if inc.ndim == 1:
        inc = inc[:, None]
    if inc.shape[0] < 100:
        raise ValueError("innovation tests need at least 100 increments")
    n, dim = inc.shape
    T = n * dt
    qv = inc.T @ inc
    qv_error = float(np.max(np.abs(qv - T * np.eye(dim))) / T)
    mean_z = float(np.linalg.norm(inc.sum(axis=0)) / np.sqrt(T * dim))
    return qv_error, mean_z


def exponential_mass_residual(traj: FilterTrajectory, innovation: np.ndarray, dt: float) -> float:
    """``sup_t |log mass_t - (sum P dw_check + 1/2 sum |P|^2 dt)|``."""
    inc = np.asarray(innovation, dtype=float).reshape(traj.steps, -1)
    if np.any(traj.mass <= 0):
        raise MassCollapseError("non-positive mass in trajectory")
    P = traj.p_beta[:-1]
    expo = np.concatenate([[0.0], np.cumsum(np.sum(P * inc, axis=1) + 0.5 * np.sum(P**2, axis=1) * dt)])
    return float(np.max(np.abs(np.log(traj.mass) - expo)))


@dataclass
class HolderFit:
    alpha_t: float
    alpha_x: float
    t_degenerate: bool = False
    x_degenerate: bool = False

    def __iter__(self):
        # unpacks as (alpha_t, alpha_x)
        return iter((self.alpha_t, self.alpha_x))


def _sup_increments(arr: np.ndarray, axis: int, lags: list[int]) -> np.ndarray:
    out = []
    n = arr.shape[axis]
    for lag in lags:
        a = np.take(arr, np.arange(lag, n), axis=axis)
        b = np.take(arr, np.arange(0, n - lag), axis=axis)
        out.append(float(np.max(np.abs(a - b))))
    return np.asarray(out)


def sup_increment_exponent(arr: np.ndarray, axis: int = 0, spacing: float = 1.0,
                           levels: int = HOLDER_LEVELS) -> tuple[float, bool]:
    """Slope of ``log sup|f(s + l) - f(s)|`` against ``log l`` over dyadic lags.

    Returns ``(exponent, degenerate)``; a vanishing increment gives the cap.
    """
    arr = np.asarray(arr, dtype=float)
    n = arr.shape[axis]
    lags = [2**j for j in range(levels) if 2**j < n]
    if len(lags) < 4:
        raise InsufficientResolution(f"only {len(lags)} dyadic lag levels along axis {axis}")
    S = _sup_increments(arr, axis, lags)
    scale = float(np.max(np.abs(arr))) or 1.0
    if np.any(S <= 1e-13 * scale):
        return EXPONENT_CAP, True
    slope = np.polyfit(np.log(np.asarray(lags) * spacing), np.log(S), 1)[0]
    return float(np.clip(slope, 0.0, EXPONENT_CAP)), False


def holder_exponents(traj: FilterTrajectory, levels: int = HOLDER_LEVELS) -> HolderFit:
    """Fitted Hoelder exponents of ``pibar`` in time and in space."""
    cadence = np.diff(traj.snapshot_index)
    if cadence.size == 0 or np.any(cadence != cadence[0]):
        raise InsufficientResolution("time exponent needs regularly spaced snapshots")
    F = traj.fields
    alpha_t, t_deg = sup_increment_exponent(F, axis=0, spacing=traj.dt * cadence[0], levels=levels)
    ax = []
    for i in range(traj.grid.d):
        ax.append(sup_increment_exponent(F, axis=1 + i, spacing=traj.grid.h[i], levels=levels))
    alpha_x = min(a for a, _ in ax)
    x_deg = all(flag for _, flag in ax)
    return HolderFit(alpha_t, alpha_x, t_deg, x_deg)


def sobolev_norm(state: FilterState | np.ndarray, p: float, grid=None) -> float:
    """Discrete ``W^1_p`` norm ``||u||_p + ||grad u||_p`` with ``h^d`` weights."""
    if p < 2:
        raise ValueError("p must be at least 2")
    if isinstance(state, FilterState):
        u, grid = state.pibar.values, state.grid
    else:
        u = np.asarray(state, dtype=float)
    vol = grid.cell_volume
    grads = [np.gradient(u, grid.h[i], axis=i, edge_order=1) for i in range(grid.d)]
    gnorm = np.sqrt(sum(g**2 for g in grads))
    lp = (np.sum(np.abs(u) ** p) * vol) ** (1.0 / p)
    glp = (np.sum(gnorm**p) * vol) ** (1.0 / p)
    return float(lp + glp)


# --------------------------------------------------------------------------- report


@dataclass
class DiagnosticsReport:
    mass_residual_sup: float | None
    exp_mass_residual_sup: float
    innovation_qv_error: float
    innovation_mean_z: float
    holder_t_exponent: float
    holder_x_exponent: float
    min_density_ratio: float
    w1p_norm_series: dict[str, list[float]]
    flags: list[str] = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION

    def to_json(self) -> str:
        payload = asdict(self)
        return json.dumps(payload, indent=2, sort_keys=True, default=float, allow_nan=False) + "\n"


_NUM = {"type": "number"}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "DiagnosticsReport",
    "type": "object",
    "additionalProperties": False,
    "required": [
        "schema_version", "mass_residual_sup", "exp_mass_residual_sup",
        "innovation_qv_error", "innovation_mean_z", "holder_t_exponent",
        "holder_x_exponent", "min_density_ratio", "w1p_norm_series", "flags",
    ],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "mass_residual_sup": {"type": ["number", "null"], "minimum": 0},
        "exp_mass_residual_sup": {"type": "number", "minimum": 0},
        "innovation_qv_error": {"type": "number", "minimum": 0},
        "innovation_mean_z": {"type": "number", "minimum": 0},
        "holder_t_exponent": {"type": "number", "minimum": 0, "maximum": EXPONENT_CAP},
        "holder_x_exponent": {"type": "number", "minimum": 0, "maximum": EXPONENT_CAP},
        "min_density_ratio": _NUM,
        "w1p_norm_series": {
            "type": "object",
            "additionalProperties": False,
            "required": ["2", "4"],
            "properties": {
                "2": {"type": "array", "items": _NUM},
                "4": {"type": "array", "items": _NUM},
            },
        },
        "flags": {"type": "array", "items": {"type": "string"}},
    },
}


def validate_report(payload: dict) -> None:
    jsonschema.validate(payload, REPORT_SCHEMA)


def diagnose(traj: FilterTrajectory, path: PathSample, spec: SystemSpec) -> DiagnosticsReport:
    """Full report for one run."""
    flags = []
    if path.w is None:
        flags.append("mass_identity_disabled_no_wiener_path")
        mass_res = None
    elif not traj.has_all_fields:
        flags.append("mass_identity_disabled_subsampled_fields")
        mass_res = None
    else:
        mass_res = mass_identity_residual(traj, path, spec)
    innov = innovation_path(traj, path, spec)
    try:
        qv, mz = innovation_tests(innov, traj.dt)
    except ValueError:
        flags.append("innovation_too_short")
        qv, mz = 0.0, 0.0
    exp_res = exponential_mass_residual(traj, innov, traj.dt)
    try:
        fit = holder_exponents(traj)
        if fit.t_degenerate:
            flags.append("holder_t_degenerate")
        if fit.x_degenerate:
            flags.append("holder_x_degenerate")
        at, axx = fit.alpha_t, fit.alpha_x
    except InsufficientResolution:
        flags.append("holder_insufficient_resolution")
        at = axx = 0.0
    series = {
        str(p): [sobolev_norm(traj.state(i), p) for i in range(len(traj.snapshot_index))]
        for p in (2, 4)
    }
    ratio = float(traj.min_value.min() / traj.max_value.max())
    return DiagnosticsReport(
        mass_residual_sup=mass_res,
        exp_mass_residual_sup=exp_res,
        innovation_qv_error=qv,
        innovation_mean_z=mz,
        holder_t_exponent=at,
        holder_x_exponent=axx,
        min_density_ratio=ratio,
        w1p_norm_series=series,
        flags=flags,
    )


def write_streams_csv(traj: FilterTrajectory, innovation: np.ndarray | None, dest) -> None:
    """Per-step streams: time, mass, min, max, P[beta] and innovation increments."""
    m = traj.p_beta.shape[1]
    cols = ["t", "mass", "min_value", "max_value"] + [f"p_beta_{i + 1}" for i in range(m)]
    cols += [f"dw_check_{i + 1}" for i in range(m)]
    inc = np.full((traj.steps + 1, m), np.nan)
    if innovation is not None:
        inc[1:] = np.asarray(innovation).reshape(traj.steps, m)
    data = np.column_stack([traj.times, traj.mass, traj.min_value, traj.max_value, traj.p_beta, inc])
    with open(dest, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

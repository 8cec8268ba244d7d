from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gaussian, scalar_spec
from zakaifilter.errors import AssemblyError, ConfigError, MassCollapseError
from zakaifilter.grid import GridSpec
from zakaifilter.model import ConditionedCoefficients, condition_coefficients
from zakaifilter.scenarios import builtin
from zakaifilter.sde_sim import simulate_system
from zakaifilter.zakai import (
    DensityField,
    FilterState,
    ZakaiStepper,
    assemble_deterministic_operator,
    assemble_stochastic_operator,
    conditional_expectation,
    initial_field,
    read_density_binary,
    read_trajectory,
    solve_zakai,
    step,
    write_density_binary,
    write_density_csv,
    write_stream_binary,
)


def _coeffs(grid, a, b=None, sigma=None, beta=None, div_a=None, div_sigma=None, m=1):
    shape, d = grid.shape, grid.d
    z = lambda *s: np.zeros(shape + s)
    return ConditionedCoefficients(
        t=0.0, y=np.zeros(m), a=a,
        b_vec=z(d) if b is None else b,
        sigma=z(d, m) if sigma is None else sigma,
        beta=z(m) if beta is None else beta,
        psi=np.eye(m),
        div_a=z(d) if div_a is None else div_a,
        div_sigma=z(m) if div_sigma is None else div_sigma,
    )


# --------------------------------------------------------------------------- independent assembly oracle


def _reference_operator(coeffs, grid, transport):
    """Matrix-product form: sum_j Div_j (A_j Grad_j + cross terms + U_j)."""
    N, d, shape = grid.size, grid.d, grid.shape
    idx = np.arange(N).reshape(shape)
    a = coeffs.a.reshape(N, d, d)
    c = (coeffs.div_a - coeffs.b_vec).reshape(N, d)
    cd = []
    for i in range(d):
        n, hi = grid.nodes[i], grid.h[i]
        D = np.zeros((n, n))
        D[np.arange(1, n - 1), np.arange(2, n)] = 0.5 / hi
        D[np.arange(1, n - 1), np.arange(0, n - 2)] = -0.5 / hi
        D[0, :2] = [-1 / hi, 1 / hi]
        D[-1, -2:] = [-1 / hi, 1 / hi]
        mats = [sp.identity(grid.nodes[k]) for k in range(d)]
        mats[i] = sp.csr_matrix(D)
        M = mats[0]
        for X in mats[1:]:
            M = sp.kron(M, X)
        cd.append(M.tocsr())
    L = sp.csr_matrix((N, N))
    for j in range(d):
        lo = [slice(None)] * d
        hi_ = [slice(None)] * d
        lo[j], hi_[j] = slice(0, -1), slice(1, None)
        left, right = idx[tuple(lo)].ravel(), idx[tuple(hi_)].ravel()
        F = left.size
        r = np.arange(F)
        G = sp.csr_matrix((np.r_[-np.ones(F), np.ones(F)] / grid.h[j], (np.r_[r, r], np.r_[left, right])),
                          shape=(F, N))
        Avg = sp.csr_matrix((np.full(2 * F, 0.5), (np.r_[r, r], np.r_[left, right])), shape=(F, N))
        width = np.broadcast_to(grid.axis_weights(j).reshape([-1 if k == j else 1 for k in range(d)]),
                                shape).ravel()
        Div = sp.diags(-grid.h[j] / width) @ G.T
        af = 0.5 * (a[left] + a[right])
        flux = sp.diags(af[:, j, j]) @ G
        for i in range(d):
            if i != j:
                flux = flux + sp.diags(af[:, i, j]) @ (Avg @ cd[i])
        cf = 0.5 * (c[left, j] + c[right, j])
        up = {"central": np.zeros(F, bool), "upwind": np.ones(F, bool)}.get(
            transport, np.abs(cf) * grid.h[j] > 2 * af[:, j, j])
        wl = np.where(up, (cf < 0).astype(float), 0.5)
        wr = np.where(up, (cf > 0).astype(float), 0.5)
        U = sp.csr_matrix((np.r_[cf * wl, cf * wr], (np.r_[r, r], np.r_[left, right])), shape=(F, N))
        L = L + Div @ (flux + U)
    return L.toarray()


@pytest.mark.parametrize("transport", ["hybrid", "upwind", "central"])
@pytest.mark.parametrize("d", [1, 2])
def test_assembly_matches_matrix_product_form(d, transport):
    rng = np.random.default_rng(d)
    grid = GridSpec.symmetric(1.0, 0.25, d) if d == 2 else GridSpec.symmetric(1.0, 0.1, 1)
    shape = grid.shape
    M = rng.normal(size=shape + (d, d)) * 0.4
    a = M @ np.swapaxes(M, -1, -2) + 0.3 * np.eye(d)
    coeffs = _coeffs(grid, a, b=rng.normal(size=shape + (d,)) * 5, div_a=rng.normal(size=shape + (d,)))
    L = assemble_deterministic_operator(coeffs, grid, transport).toarray()
    np.testing.assert_allclose(L, _reference_operator(coeffs, grid, transport), atol=1e-10)


def test_laplacian_stencil(grid1):
    L = assemble_deterministic_operator(_coeffs(grid1, np.ones(grid1.shape + (1, 1))), grid1)
    h2 = grid1.h[0] ** 2
    row = L[50].toarray().ravel()
    np.testing.assert_allclose(row[49:52] * h2, [1, -2, 1], atol=1e-12)
    assert np.count_nonzero(row) == 3


def test_constant_in_kernel(grid1):
    rng = np.random.default_rng(0)
    a = 1 + rng.uniform(size=grid1.shape + (1, 1))
    L = assemble_deterministic_operator(_coeffs(grid1, a), grid1)
    np.testing.assert_allclose(L @ np.full(grid1.size, 3.0), 0.0, atol=1e-9)


def test_column_sums_vanish(grid1):
    # zero-flux boundaries: trapezoid mass is conserved by L*
    rng = np.random.default_rng(1)
    a = 1 + rng.uniform(size=grid1.shape + (1, 1))
    coeffs = _coeffs(grid1, a, b=rng.normal(size=grid1.shape + (1,)))
    L = assemble_deterministic_operator(coeffs, grid1)
    np.testing.assert_allclose(grid1.weights.ravel() @ L, 0.0, atol=1e-9)


def test_variable_coefficient_second_order():
    # a = 1 + 0.1 sin x, b = 0: L* u = (a u' + a' u)'
    errs = []
    for h in (0.1, 0.05, 0.025):
        g = GridSpec.symmetric(4.0, h, 1)
        x = g.axes[0]
        a = 1 + 0.1 * np.sin(x)
        da = 0.1 * np.cos(x)
        dda = -0.1 * np.sin(x)
        u = np.exp(-x**2)
        du = -2 * x * u
        ddu = (4 * x**2 - 2) * u
        exact = da * du + a * ddu + dda * u + da * du
        coeffs = _coeffs(g, a.reshape(-1, 1, 1), div_a=da.reshape(-1, 1))
        got = assemble_deterministic_operator(coeffs, g) @ u
        inner = np.abs(x) < 3
        errs.append(np.abs(got - exact)[inner].max())
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.9)


def test_assembly_rejects_indefinite(grid1):
    with pytest.raises(AssemblyError):
        assemble_deterministic_operator(_coeffs(grid1, -np.ones(grid1.shape + (1, 1))), grid1)


def test_assembly_unknown_transport(grid1):
    with pytest.raises(ConfigError):
        assemble_deterministic_operator(_coeffs(grid1, np.ones(grid1.shape + (1, 1))), grid1, "weno")


def test_stochastic_multiplication(grid1):
    a = np.ones(grid1.shape + (1, 1))
    S = assemble_stochastic_operator(_coeffs(grid1, a, beta=np.full(grid1.shape + (1,), 0.7)), grid1, 0)
    np.testing.assert_allclose(S.toarray(), 0.7 * np.eye(grid1.size))
    x = grid1.axes[0]
    S = assemble_stochastic_operator(_coeffs(grid1, a, beta=x.reshape(-1, 1)), grid1, 0)
    np.testing.assert_allclose(S.toarray(), np.diag(x))


def test_stochastic_transport_second_order():
    s = 0.6
    errs = []
    for h in (0.1, 0.05, 0.025):
        g = GridSpec.symmetric(4.0, h, 1)
        x = g.axes[0]
        u = np.exp(-x**2)
        coeffs = _coeffs(g, np.ones(g.shape + (1, 1)), sigma=np.full(g.shape + (1, 1), s))
        got = assemble_stochastic_operator(coeffs, g, 0) @ u
        errs.append(np.abs(got - (-s * -2 * x * u))[1:-1].max())
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.9)


def test_stochastic_channel_range(grid1):
    with pytest.raises(ConfigError):
        assemble_stochastic_operator(_coeffs(grid1, np.ones(grid1.shape + (1, 1))), grid1, 1)


# --------------------------------------------------------------------------- stepping


def _state(grid, values, t=0.0):
    return FilterState(t, DensityField(np.asarray(values, float).reshape(grid.shape), grid))


def test_step_conserves_mass_uninformative(grid1):
    spec = scalar_spec(b={"family": "linear", "matrix": [[-1.0, 0.0]]})
    coeffs = condition_coefficients(spec, 0.0, [0.0], grid1)
    s = _state(grid1, initial_field(spec, grid1))
    for _ in range(20):
        s = step(s, 0.01, [0.3], coeffs)
    assert abs(s.pibar.mass - 1.0) < 1e-10


def test_step_matches_dense_heat_solve():
    # 64 nodes, implicit Euler against a dense solve of the same half-cell scheme
    g = GridSpec((-3.15,), (0.1,), (64,))
    spec = scalar_spec()
    coeffs = condition_coefficients(spec, 0.0, [0.0], g)
    x = g.axes[0]
    u0 = gaussian(x, 0.2, 0.3)
    dt, h = 0.01, 0.1
    L = np.zeros((64, 64))
    for i in range(1, 63):
        L[i, i - 1 : i + 2] = [1, -2, 1]
    L[0, :2] = [-2, 2]
    L[-1, -2:] = [2, -2]
    expected = np.linalg.solve(np.eye(64) - dt * L / h**2, u0)
    got = step(_state(g, u0), dt, [0.0], coeffs).pibar.values
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-15)


def test_step_zero_dt_multiplicative(grid1):
    c = 0.4
    spec = scalar_spec(B={"family": "constant", "value": [c]})
    coeffs = condition_coefficients(spec, 0.0, [0.0], grid1)
    u = initial_field(spec, grid1)
    out = step(_state(grid1, u), 0.0, [0.5], coeffs)  # beta dw_hat = 0.2
    np.testing.assert_allclose(out.pibar.values, 1.2 * u, rtol=1e-14)


def test_milstein_scalar_multiplicative(grid1):
    # for a multiplication operator c, Milstein adds c^2 (dw^2 - dt) / 2
    c, dw, dt = 0.4, 0.5, 0.0
    spec = scalar_spec(B={"family": "constant", "value": [c]})
    coeffs = condition_coefficients(spec, 0.0, [0.0], grid1)
    u = initial_field(spec, grid1)
    out = step(_state(grid1, u), dt, [dw], coeffs, noise="milstein")
    np.testing.assert_allclose(out.pibar.values, (1 + c * dw + 0.5 * c * c * dw * dw) * u, rtol=1e-14)


def test_stepper_validation(grid1):
    with pytest.raises(ConfigError):
        ZakaiStepper(grid1, 0.1, scheme="rk4")
    with pytest.raises(ConfigError):
        ZakaiStepper(grid1, 0.1, noise="heun")
    with pytest.raises(ConfigError):
        ZakaiStepper(grid1, -0.1)


def test_mass_collapse(grid1):
    with pytest.raises(MassCollapseError):
        _state(grid1, np.zeros(grid1.size))


# --------------------------------------------------------------------------- solver


@pytest.fixture(scope="module")
def heat_run():
    cfg = builtin("heat")
    spec = cfg.build_system()
    path = simulate_system(spec, cfg.time["dt"], 0)
    return spec, path, solve_zakai(spec, path, cfg.grid_spec(1), snapshot_every=100)


def test_heat_kernel(heat_run):
    spec, path, traj = heat_run
    x = traj.grid.axes[0]
    for i, k in enumerate(traj.snapshot_index):
        t = traj.times[k]
        err = np.abs(traj.fields[i] - gaussian(x, 0.0, 0.25 + 2 * t)).max()
        assert err < 5e-3
    assert np.abs(traj.mass - 1.0).max() < 1e-8


def test_initial_mass_is_one(heat_run):
    assert heat_run[2].mass[0] == pytest.approx(1.0, abs=1e-14)


def test_solver_bit_identical():
    cfg = builtin("generic")
    spec = cfg.build_system()
    path = simulate_system(spec, cfg.time["path_dt"], 1).coarsen(4)
    path = type(path)(path.dt, path.w[:100], path.z[:101], path.d, path.seed)
    a = solve_zakai(spec, path, cfg.grid_spec(1), snapshot_every=10)
    b = solve_zakai(spec, path, cfg.grid_spec(1), snapshot_every=10)
    np.testing.assert_array_equal(a.fields, b.fields)
    np.testing.assert_array_equal(a.mass, b.mass)


@settings(max_examples=5, deadline=None)
@given(st.floats(0.1, 10.0))
def test_linearity_and_normalization(c):
    cfg = builtin("cross_term")
    spec = cfg.build_system()
    path = simulate_system(spec, 1e-3, 4)
    path = type(path)(path.dt, path.w[:50], path.z[:51], path.d, path.seed)
    grid = cfg.grid_spec(1)
    u0 = initial_field(spec, grid)
    a = solve_zakai(spec, path, grid, initial=u0, snapshot_every=None)
    b = solve_zakai(spec, path, grid, initial=c * u0, snapshot_every=None)
    np.testing.assert_allclose(b.fields, c * a.fields, rtol=1e-9, atol=1e-14 * c)
    na, nb = a.state(-1).normalized.values, b.state(-1).normalized.values
    np.testing.assert_allclose(na, nb, atol=1e-12)


def test_negativity_is_monitored_not_clipped():
    cfg = builtin("cross_term")
    spec = cfg.build_system()
    path = simulate_system(spec, 1e-3, 2)
    traj = solve_zakai(spec, path, cfg.grid_spec(1), snapshot_every=None, noise="milstein")
    assert traj.negativity_ratio <= 1e-3
    np.testing.assert_array_equal(traj.min_value[-1], traj.fields[-1].min())


def test_support_check():
    cfg = builtin("heat")
    spec = cfg.build_system()
    path = simulate_system(spec, 1e-3, 0)
    with pytest.raises(ConfigError):
        solve_zakai(spec, path, GridSpec.symmetric(2.0, 0.05, 1))


def test_conditional_expectation(grid1):
    u = gaussian(grid1.axes[0], 0.7, 0.3) * 3.0
    s = _state(grid1, u)
    assert conditional_expectation(s, np.ones(grid1.shape)) == pytest.approx(1.0, abs=1e-14)
    assert conditional_expectation(s, np.full(grid1.shape, 2.5)) == pytest.approx(2.5, abs=1e-13)
    assert conditional_expectation(s, lambda p: p[:, 0]) == pytest.approx(0.7, abs=1e-10)


# --------------------------------------------------------------------------- IO


def test_density_and_stream_roundtrip(tmp_path, heat_run):
    traj = heat_run[2]
    write_density_binary(traj, tmp_path / "d.bin")
    write_stream_binary(traj, tmp_path / "s.bin")
    grid, times, fields = read_density_binary(tmp_path / "d.bin")
    assert grid == traj.grid
    np.testing.assert_array_equal(fields, traj.fields)
    back = read_trajectory(tmp_path / "s.bin", tmp_path / "d.bin")
    for name in ("times", "mass", "min_value", "max_value", "p_beta", "dw_hat", "snapshot_index"):
        np.testing.assert_array_equal(getattr(back, name), getattr(traj, name))
    assert back.stride == traj.stride and back.dt == traj.dt


def test_mismatched_pair(tmp_path, heat_run):
    traj = heat_run[2]
    write_stream_binary(traj, tmp_path / "s.bin")
    other = solve_zakai(heat_run[0], heat_run[1], traj.grid, snapshot_every=50)
    write_density_binary(other, tmp_path / "d.bin")
    with pytest.raises(ConfigError):
        read_trajectory(tmp_path / "s.bin", tmp_path / "d.bin")


def test_density_csv(tmp_path, heat_run):
    traj = heat_run[2]
    write_density_csv(traj.fields[-1], traj.grid, tmp_path / "f.csv")
    data = np.loadtxt(tmp_path / "f.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 1], traj.fields[-1])

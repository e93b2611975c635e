import math

import numpy as np
import pytest

from bspde_smp.errors import CFLError, ConfigError, QuadratureError
from bspde_smp.sde import McConfig
from bspde_smp.three_step import (FbspdeSpec, GridConfig, KernelQuadConfig, PdeSolution, constant_spec,
                                  decoupled_drift, example_e_frozen, gamma0_kernel, inject_exact,
                                  manufactured, pde_residual, picard_kernel_step, read_grid, run_three_step,
                                  solve_by_kernel, solve_decoupling_pde, spec_from_name)
from bspde_smp.three_step.grid import d1, d2, diag_grad

SMALL = GridConfig(L=2.0, n_xy=41, n_t=100)
FINE = GridConfig(L=2.0, n_xy=81, n_t=400)


@pytest.fixture(scope="module")
def ms():
    return manufactured()


@pytest.fixture(scope="module")
def ms_small(ms):
    return solve_decoupling_pde(ms, SMALL)


@pytest.fixture(scope="module")
def frozen(closed):
    return example_e_frozen(closed.u_bar)


def test_constant_spec_is_exact():
    pde = solve_decoupling_pde(constant_spec(2.0), GridConfig(L=4.0, n_xy=21))
    assert np.all(pde.theta == 2.0)
    assert pde_residual(pde, constant_spec(2.0)) <= 1e-12


def test_frozen_example_matches_closed_form(frozen, closed):
    pde = solve_decoupling_pde(frozen, GridConfig(L=8.0, n_xy=41))
    X, Y = np.meshgrid(pde.x, pde.x, indexing="ij")
    for k, t in enumerate(pde.t_grid):
        assert np.max(np.abs(pde.theta[k] - float(closed.M(t)))) <= 1e-10
    # p-independent coefficients: the second sweep changes nothing
    assert pde.picard_iterations == 2 and pde.update_history[1] <= 1e-8
    assert np.ptp(pde.theta[0], axis=0).max() <= 1e-10  # no variation along x


def test_manufactured_convergence(ms, ms_small):
    fine = solve_decoupling_pde(ms, FINE)
    errs = []
    for pde in (ms_small, fine):
        X, Y = np.meshgrid(pde.x, pde.x, indexing="ij")
        errs.append(max(np.max(np.abs(pde.theta[k] - ms.exact(t, X, Y))) for k, t in enumerate(pde.t_grid)))
    h = ms_small.h
    assert errs[0] <= 2 * (h * h + ms_small.dt)
    assert 3.0 <= errs[0] / errs[1] <= 5.0


def test_injected_residual_ratio(ms):
    r = [pde_residual(inject_exact(ms, g), ms) for g in (SMALL, FINE)]
    assert 3.0 <= r[0] / r[1] <= 5.0


def test_solver_residual_near_injected(ms, ms_small):
    assert pde_residual(ms_small, ms) <= 10 * pde_residual(inject_exact(ms, SMALL), ms)


def test_terminal_exactness(ms, ms_small, frozen):
    X, Y = np.meshgrid(ms_small.x, ms_small.x, indexing="ij")
    assert np.array_equal(ms_small.theta[-1], ms.terminal_value(X, Y))
    pde = solve_decoupling_pde(frozen, GridConfig(L=4.0, n_xy=21))
    assert np.all(pde.theta[-1] == 0.0)


def test_stored_derivatives_match_redifferencing(ms_small):
    h = ms_small.h
    th = ms_small.theta
    for stored, fresh in [(ms_small.theta_x, d1(th, h, 1)), (ms_small.theta_y, d1(th, h, 2)),
                          (ms_small.theta_xx, d2(th, h, 1)), (ms_small.theta_yy, d2(th, h, 2)),
                          (ms_small.theta_xy, d1(d1(th, h, 1), h, 2))]:
        assert np.max(np.abs(stored - fresh)) <= 1e-12


def test_cfl_error(ms):
    with pytest.raises(CFLError) as e:
        solve_decoupling_pde(ms, GridConfig(L=2.0, n_xy=41, n_t=5))
    assert e.value.admissible_dt < 0.25 / 5


def test_grid_validation():
    with pytest.raises(ConfigError):
        GridConfig(L=-1.0)
    with pytest.raises(ConfigError):
        solve_decoupling_pde(FbspdeSpec(lambda t, x, p: 0.0, lambda t, x: 1.0, lambda t, x, p: 0.0,
                                        lambda x: 0.0, 1.0, state_dim=2), SMALL)
    with pytest.raises(ConfigError):
        spec_from_name("nope")


def test_decoupled_drift_examples(ms, ms_small, frozen, closed):
    spec_p = FbspdeSpec(lambda t, x, p: p, lambda t, x: 1.0, lambda t, x, p: 0.0, lambda x: 3.0, 1.0)
    pde = solve_decoupling_pde(spec_p, GridConfig(L=4.0, n_xy=21))
    assert np.all(decoupled_drift(pde, spec_p, 0.3, np.array([0.0, 1.0])) == 0.0)
    fr = solve_decoupling_pde(frozen, GridConfig(L=4.0, n_xy=21))
    assert np.allclose(decoupled_drift(fr, frozen, 0.5, np.linspace(-1, 1, 5)), closed.u_bar, atol=0)
    assert abs(decoupled_drift(ms_small, ms, 0.0, np.array([0.0]))[0] - 1.0) <= 5e-3


def test_drift_outside_grid_warns(ms_small, ms):
    pde = PdeSolution(**{k: getattr(ms_small, k) for k in ("t_grid", "x", "theta", "step_times", "diag_grad", "L")})
    decoupled_drift(pde, ms, 0.1, np.array([5.0]))
    assert pde.warnings and "clamped" in pde.warnings[0]


def test_three_step_constant():
    sol = run_three_step(constant_spec(2.0), GridConfig(L=6.0, n_xy=21), McConfig(50, 20, 1))
    assert np.all(sol.p == 2.0) and np.all(sol.q == 0.0)


def test_three_step_frozen(frozen, closed):
    sol = run_three_step(frozen, GridConfig(L=8.0, n_xy=41), McConfig(200, 20, 2))
    for k, t in enumerate(sol.times):
        assert np.max(np.abs(sol.p_at(k) - float(closed.M(t)))) <= 1e-10
    assert np.max(np.abs(sol.q)) <= 1e-10
    assert np.all(sol.p[-1] == 0.0)
    # the forward state is a Brownian motion with drift u_bar
    assert abs(sol.states[:, -1].mean() - closed.u_bar) <= 3 / math.sqrt(200)


def test_three_step_manufactured(ms, ms_small, tmp_path):
    sol = run_three_step(ms, None, McConfig(100, 20, 3), pde=ms_small)
    x = sol.x_grid
    err = 0.0
    for k, t in enumerate(sol.times):
        exact = ms.exact(t, x[None, :], sol.states[:, k][:, None])
        err = max(err, float(np.max(np.abs(sol.p_at(k) - exact))))
    assert err <= 2 * (ms_small.h ** 2 + ms_small.dt)
    assert np.all(np.isfinite(sol.p)) and np.all(np.isfinite(sol.q))
    assert sol.provenance["seed"] == 3 and sol.provenance["grid"]["n_xy"] == 41
    sol.to_csv(tmp_path / "paths.csv", max_paths=3)
    rows = (tmp_path / "paths.csv").read_text().splitlines()
    assert rows[0] == "path,step,t,x,p_diag,q_diag" and len(rows) == 1 + 3 * 21


def test_terminal_assembly_identity():
    spec = FbspdeSpec(lambda t, x, p: 0.5 * p, lambda t, x: 1.0, lambda t, x, p: 0.1 * p * p, np.sin, 0.5)
    sol = run_three_step(spec, GridConfig(L=4.0, n_xy=33), McConfig(50, 10, 4))
    assert np.array_equal(sol.p[-1], np.broadcast_to(np.sin(sol.x_grid), sol.p[-1].shape))


def test_three_step_horizon_mismatch(ms_small):
    with pytest.raises(ConfigError):
        run_three_step(manufactured(0.5), None, McConfig(10, 5, 1), pde=ms_small)


def test_binary_and_csv_round_trip(ms_small, tmp_path):
    ms_small.to_binary(tmp_path / "theta.grid")
    header, data = read_grid(tmp_path / "theta.grid")
    assert np.array_equal(data, ms_small.theta)
    assert header["L"] == 2.0 and header["dims"] == list(ms_small.theta.shape)
    ms_small.to_csv_slice(tmp_path / "slice.csv", 0)
    arr = np.loadtxt(tmp_path / "slice.csv", delimiter=",", skiprows=1)
    assert np.array_equal(arr[:, 3].reshape(41, 41), ms_small.theta[0])
    (tmp_path / "bad.grid").write_bytes(b"nonsense")
    with pytest.raises(ConfigError):
        read_grid(tmp_path / "bad.grid")


# kernel ---------------------------------------------------------------------

def test_kernel_at_coincident_points():
    a = np.array([[2.0, 0.3], [0.3, 1.0]])
    val = gamma0_kernel(0.1, [0.5, 0.5], 0.6, [0.5, 0.5], a)
    assert val == pytest.approx(1.0 / (4 * math.pi * 0.5 * math.sqrt(np.linalg.det(a))), rel=1e-14)


def test_kernel_normalisation():
    g = np.linspace(-20, 20, 2001)
    Z = np.stack(np.meshgrid(g, g, indexing="ij"), -1)
    vals = gamma0_kernel(0.0, [0.0, 0.0], 1.0, Z, np.eye(2))
    mass = np.trapezoid(np.trapezoid(vals, g, axis=1), g)
    assert abs(mass - 1.0) <= 1e-6


def test_kernel_symmetry_and_errors():
    a = np.array([[1.0, 0.4], [0.4, 0.8]])
    X, Z = np.array([0.3, -0.2]), np.array([-1.0, 0.7])
    assert gamma0_kernel(0, X, 0.4, Z, a) == pytest.approx(gamma0_kernel(0, Z, 0.4, X, a), rel=1e-14)
    for bad in ([[1.0, 0.0], [0.0, 0.0]], [[1.0, 0.2], [0.1, 1.0]], np.eye(3), [[1.0, 2.0], [2.0, 1.0]]):
        with pytest.raises(ConfigError):
            gamma0_kernel(0, X, 1.0, Z, bad)
    with pytest.raises(ConfigError):
        gamma0_kernel(1.0, X, 1.0, Z, a)


def test_chapman_kolmogorov():
    a = np.array([[1.0, 0.3], [0.3, 0.6]])
    X, Y = np.array([0.2, -0.1]), np.array([-0.4, 0.5])
    g = np.linspace(-12, 12, 801)
    Z = np.stack(np.meshgrid(g, g, indexing="ij"), -1)
    prod = gamma0_kernel(0.0, X, 0.4, Z, a) * gamma0_kernel(0.0, Z, 0.6, Y, a)  # homogeneous in time
    conv = np.trapezoid(np.trapezoid(prod, g, axis=1), g)
    assert abs(conv - gamma0_kernel(0.0, X, 1.0, Y, a)) <= 1e-4


def test_quadrature_box_too_small():
    with pytest.raises(QuadratureError):
        KernelQuadConfig(R=1.5).rule(2)
    xi, w, mass = KernelQuadConfig().rule(2)
    assert mass > 1 - 1e-3 and abs(w.sum() - 1.0) <= 1e-14 and xi.shape == (169, 2)


def _zero_field(horizon, L=3.0, n=21, levels=5):
    x = np.linspace(-L, L, n)
    t = np.linspace(0.0, horizon, levels)
    z = np.zeros((levels, n, n))
    return PdeSolution(t_grid=t, x=x, theta=z, step_times=t.copy(), diag_grad=np.zeros((levels, n)), L=L)


def test_kernel_step_constant():
    out = picard_kernel_step(_zero_field(1.0), constant_spec(3.0))
    assert np.max(np.abs(out.theta - 3.0)) <= 1e-12


def test_kernel_step_heat_mean():
    spec = FbspdeSpec(lambda t, x, p: 0.0, lambda t, x: 1.0, lambda t, x, p: 0.0, lambda x: x, 1.0)
    v = _zero_field(1.0)
    out = picard_kernel_step(v, spec, a_matrix=0.5 * np.eye(2))
    X = np.meshgrid(v.x, v.x, indexing="ij")[0]
    assert np.max(np.abs(out.theta - X[None])) <= 1e-3


def test_kernel_rejects_bad_matrix():
    with pytest.raises(ConfigError):
        picard_kernel_step(_zero_field(1.0), constant_spec(), a_matrix=np.eye(4))


def test_kernel_agrees_with_grid_on_short_horizon():
    spec = manufactured(0.05)
    v, hist = solve_by_kernel(spec, 2.5, 41, 11, iterations=10, tol=1e-4)
    assert hist[-1] <= 1e-4 and len(hist) <= 10
    assert all(b < a for a, b in zip(hist, hist[1:]))
    grid = solve_decoupling_pde(spec, GridConfig(L=2.5, n_xy=41))
    X, Y = np.meshgrid(v.x, v.x, indexing="ij")
    inner = (np.abs(X) <= 1.25) & (np.abs(Y) <= 1.25)
    for k, t in enumerate(v.t_grid):
        diff = np.abs(v.theta[k] - grid.theta_at(t, X, Y))
        assert diff[inner].max() <= 5e-3 and diff.max() <= 5e-3

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bspde_smp.errors import ConfigError, GridMismatchError
from bspde_smp.problem import ControlDomain, ControlPolicy, ControlProblem, build_example_e
from bspde_smp.sde import McConfig
from bspde_smp.smp import (CostateLattice, ExtendedCostate, SpikePerturbation, TerminalCostate,
                           adjoint_along_path, assemble_adjoint, example_e_costate, hamiltonian,
                           minimize_batch, minimize_extended_hamiltonian, objective_via_bspde, smp_report,
                           spike_difference_check, spike_perturb, sufficient_check, variational_residual)

X0 = np.array([0.0])


def test_hamiltonian_examples(ex):
    assert hamiltonian(ex, 0.0, X0, 0.0, 1.0, 0.0) == 0.5
    assert hamiltonian(ex, 0.3, [2.0], -1.0, 2.0, 3.0) == 1.0
    flat = ex.replace(running_cost=lambda t, x, u: 0.0)
    assert hamiltonian(flat, 0.0, X0, 1.3, 0.0, 0.0) == 0.0


@pytest.mark.parametrize("p, u", [(-0.41538, -0.58462), (0.0, -1.0), (5.0, -2.0), (-5.0, 2.0)])
def test_minimizer_examples(ex, p, u):
    ustar, val = minimize_extended_hamiltonian(ex, 0.0, X0, ExtendedCostate.from_p_eff(p))
    assert abs(ustar[0] - u) <= 1e-12
    assert abs(val - (u * p + 0.5 * (u + 1) ** 2)) <= 1e-12


def test_minimizer_against_scan(ex):
    grid = np.linspace(-2, 2, 1_000_001)
    for p in np.random.default_rng(3).uniform(-5, 5, 20):
        u, _ = minimize_extended_hamiltonian(ex, 0.0, X0, p)
        assert abs(u[0] - grid[np.argmin(grid * p + 0.5 * (grid + 1) ** 2)]) <= 1e-5


def _finite_problem():
    return ControlProblem(1, 1, 1.0, [0.0], lambda t, x, u: u, lambda t, x: 1.0,
                          lambda t, x, u: 0.5 * u[..., 0] ** 2, lambda x: 0.0, lambda m: 0.0, lambda m: 0.0,
                          ControlDomain.finite_set([[-1.0], [0.0], [1.0]]))


def test_finite_set_scan_and_ties():
    p = _finite_problem()
    u, _ = minimize_extended_hamiltonian(p, 0.0, X0, [2.0])
    assert u[0] == -1.0
    # p = 0.5: H(-1) = 0, H(0) = 0, H(1) = 1 -> first index wins
    u, v = minimize_extended_hamiltonian(p, 0.0, X0, [0.5])
    assert u[0] == -1.0 and v == 0.0
    with pytest.raises(ConfigError, match="sufficiency check requires convex domain"):
        sufficient_check(p, ControlPolicy.constant(0.0), TerminalCostate(p), [0.0])


def _quartic_2d():
    # non-separable, non-quadratic in u: falls back to multistart
    def f(t, x, u):
        return np.exp(u[..., 0] - 0.3) - u[..., 0] + (u[..., 0] - u[..., 1]) ** 2
    return ControlProblem(2, 2, 1.0, [0.0, 0.0], lambda t, x, u: 0.0 * u, lambda t, x: np.eye(2), f,
                          lambda x: 0.0, lambda m: 0.0, lambda m: np.zeros(2), ControlDomain.box([-1, -1], [1, 1]))


def test_multistart_on_nonquadratic():
    p = _quartic_2d()
    u, v = minimize_extended_hamiltonian(p, 0.0, np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(u, [0.3, 0.3], atol=1e-3)
    assert abs(v - 0.7) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(-3, 3))
def test_argmin_consistency(p, c):
    ex = build_example_e()
    u, v = minimize_extended_hamiltonian(ex, 0.0, X0, [p])
    grid = np.linspace(-2, 2, 41)
    res = [variational_residual(ex, 0.0, X0, g, u, [p]) for g in grid]
    assert min(res) >= -1e-10
    shifted = ex.replace(running_cost=lambda t, x, uu: 0.5 * (uu[..., 0] + 1.0) ** 2 + c)
    u2, v2 = minimize_extended_hamiltonian(shifted, 0.0, X0, [p])
    assert abs(u2[0] - u[0]) <= 1e-9 and abs(v2 - v - c) <= 1e-9


def test_variational_residual_examples(ex, closed):
    p = closed.adjoint_p()
    assert variational_residual(ex, 0.2, X0, 0.7, 0.7, [p]) == 0.0
    r = variational_residual(ex, 0.2, X0, 0.0, closed.u_bar, [p])
    assert abs(r - 0.5 * closed.u_bar ** 2) <= 1e-12 and abs(r - 0.17089) < 1e-5
    grid = np.linspace(-2, 2, 401)
    assert min(variational_residual(ex, 0.2, X0, g, closed.u_bar, [p]) for g in grid) >= -1e-12


def test_extended_costate_recompute():
    c = ExtendedCostate.build([0.3, -1.0], [[1.0, 0.2], [0.1, 0.9]], [0.5, -2.0])
    assert np.max(np.abs(c.recompute() - c.p_eff)) <= 1e-14


def test_spike_policy():
    base = ControlPolicy.constant(-0.58462)
    pol = spike_perturb(base, 0.3, 0.1, 2.0, horizon=1.0)
    x = np.zeros((1, 1))
    assert pol(0.35, x)[0, 0] == 2.0 and pol(0.3, x)[0, 0] == 2.0
    assert pol(0.4, x)[0, 0] == -0.58462 and pol(0.29, x)[0, 0] == -0.58462
    same = spike_perturb(base, 0.0, 1.0, -0.58462, horizon=1.0)
    for t in np.linspace(0, 1, 11):
        assert same(t, x)[0, 0] == base(t, x)[0, 0]
    with pytest.raises(ConfigError):
        spike_perturb(base, 0.95, 0.1, 1.0, horizon=1.0)
    with pytest.raises(ConfigError):
        spike_perturb(base, 0.5, 0.1, 3.0, horizon=1.0, domain=ControlDomain.box([-2], [2]))


def test_feedback_spike():
    base = ControlPolicy.feedback(lambda t, x: -x)
    pol = SpikePerturbation(0.2, 0.1, [1.0], base, 1.0).policy()
    x = np.array([[0.4]])
    assert pol(0.25, x)[0, 0] == 1.0 and pol(0.5, x)[0, 0] == -0.4
    assert 0.2 in pol.breakpoints and pol.breakpoints[-1] == pytest.approx(0.3)


def test_spike_with_base_value_is_exactly_zero(ex, closed, optimal):
    sp = SpikePerturbation(0.2, 0.1, [closed.u_bar], optimal, 1.0)
    chk = spike_difference_check(ex, optimal, sp, McConfig(5000, 50, 1), example_e_costate(closed))
    assert chk.lhs == 0.0 and chk.rhs == 0.0 and chk.passed


def test_spike_identity_at_optimum(ex, closed, optimal):
    sp = SpikePerturbation(0.2, 0.1, [1.0], optimal, 1.0)
    chk = spike_difference_check(ex, optimal, sp, McConfig(100_000, 100, 2), example_e_costate(closed))
    # cost difference in closed form: the spike moves the terminal mean by eps (v - u_bar)
    ub, eps = closed.u_bar, 0.1
    exact = eps * (0.5 * 2.0 ** 2 - 0.5 * (ub + 1) ** 2) + float(ex.G([ub + eps * (1 - ub)]) - ex.G([ub]))
    assert abs(exact - 0.1297) < 1e-3
    assert chk.passed and chk.lhs_nonnegative
    assert abs(chk.lhs - exact) <= 3 * chk.lhs_se
    assert abs(chk.rhs - exact) <= 3 * chk.combined_se
    json.dumps(chk.to_dict())


def test_spike_with_lattice_costate(ex, optimal, closed):
    # nonlinear feedback base so the fields are not trivial
    base = ControlPolicy.feedback(lambda t, x: np.clip(-0.5 * x - 0.5, -2, 2))
    lat = CostateLattice.around_paths(ex, base, McConfig(2048, 40, 3), n_t=11, n_x=9)
    sp = SpikePerturbation(0.5, 0.2, [1.0], base, 1.0)
    chk = spike_difference_check(ex, base, sp, McConfig(50_000, 40, 4), lat)
    assert chk.passed, chk


def test_lattice_matches_closed_forms(ex, closed, optimal):
    lat = CostateLattice.around_paths(ex, optimal, McConfig(512, 20, 5), n_t=5, n_x=5)
    x = np.array([[-0.5], [0.0], [0.7]])
    cs = lat(0.3, x)
    np.testing.assert_allclose(cs.theta_x, 0.0, atol=1e-10)
    np.testing.assert_allclose(cs.g_x[:, 0, 0], 1.0, atol=1e-10)
    np.testing.assert_allclose(cs.g[:, 0], x[:, 0] + closed.L(0.3), atol=1e-10)


def test_objective_formula(ex, closed):
    assert objective_via_bspde(0.0, [0.0], lambda m: 0.0) == 0.0
    j = objective_via_bspde(float(closed.M(0)), closed.g(0, 0.0), ex)
    assert abs(j - (-0.26898)) < 1e-5 and j == pytest.approx(closed.J, abs=1e-15)


def test_assemble_adjoint(ex, closed):
    K = 6
    p = assemble_adjoint(np.zeros((K, 1)), np.ones((K, 1, 1)), ex.G_grad(closed.m_star))
    np.testing.assert_allclose(p, closed.adjoint_p(), atol=1e-15)
    assert abs(closed.adjoint_p() - (-0.41538)) < 1e-5
    # G = 0, h = x: terminal value is h_x = 1
    p = assemble_adjoint([[1.0]], [[[1.0]]], [0.0])
    assert p[0, 0] == 1.0
    with pytest.raises(GridMismatchError):
        assemble_adjoint(np.zeros((3, 1)), np.ones((4, 1, 1)), [0.0])
    with pytest.raises(GridMismatchError):
        assemble_adjoint(np.zeros((3, 1)), np.ones((3, 1, 1)), [0.0], times=[0, 0.5, 1],
                         trajectory_times=[0, 0.4, 1])


def test_adjoint_terminal_condition(ex, closed, optimal):
    times = np.array([0.5, 1.0])
    p, _ = adjoint_along_path(ex, optimal, times, [[0.1], [0.3]], McConfig(1000, 10, 1), [closed.m_star],
                              h_grad=lambda x: np.zeros_like(x))
    assert p[-1, 0] == ex.G_grad(closed.m_star)[0]


def test_adjoint_heat_oracle():
    heat = ControlProblem(1, 1, 1.0, [0.0], lambda t, x, u: 0.0 * x, lambda t, x: 1.0, lambda t, x, u: 0.0,
                          lambda x: x[..., 0] ** 2, lambda m: 0.0, lambda m: 0.0, ControlDomain.box([-1], [1]))
    times = np.array([0.0, 0.25, 0.5, 0.75])
    xs = np.array([[0.0], [0.4], [-0.3], [1.1]])
    p, se = adjoint_along_path(heat, ControlPolicy.constant(0.0), times, xs, McConfig(20_000, 20, 7), [0.0])
    assert np.all(np.abs(p[:, 0] - 2 * xs[:, 0]) <= 3 * se[:, 0] + 1e-6)


def test_sufficiency_at_optimum(ex, closed, optimal):
    rep = sufficient_check(ex, optimal, example_e_costate(closed), closed.m_star)
    assert rep.first_order.passed and rep.hamiltonian_convexity.passed and rep.terminal_convexity.passed
    assert rep.differentiable_in_u
    assert not rep.meanfield_convexity.passed  # G is concave near 0
    json.dumps(rep.to_dict())


def test_sufficiency_flags_u_zero(ex):
    pol = ControlPolicy.constant(0.0)
    times = np.linspace(0, 1, 11)
    rep = sufficient_check(ex, pol, TerminalCostate(ex), [0.0], times=times)
    bad_t = {v["t"] for v in rep.first_order.violations}
    assert rep.first_order.n_violations > 0
    assert len(bad_t) == len(times) or rep.first_order.n_violations >= len(times)


def test_sufficiency_flags_concave_cost(ex, closed, optimal):
    concave = ex.replace(running_cost=lambda t, x, u: -(u[..., 0] + 1.0) ** 2)
    rep = sufficient_check(concave, optimal, example_e_costate(closed), closed.m_star)
    assert not rep.hamiltonian_convexity.passed


def test_report_at_optimum_and_zero(ex, closed, optimal):
    rep = smp_report(ex, optimal, example_e_costate(closed), closed.m_star, u_points=401, tolerance=1e-10)
    assert rep.verdict and rep.min_residual >= -1e-10
    assert rep.residuals.shape == (21, 401)
    json.loads(rep.to_json())
    assert "verdict: pass" in rep.to_table()
    bad = smp_report(ex, ControlPolicy.constant(0.0), TerminalCostate(ex), [0.0], u_points=401)
    assert not bad.verdict
    assert np.all(bad.residuals.min(axis=1) <= -0.05)
    assert len(bad.failures()) >= 21


def test_report_tolerance_widens_with_mean_error(ex, closed, optimal):
    rep = smp_report(ex, optimal, example_e_costate(closed), closed.m_star + 0.01, terminal_mean_se=[0.01])
    assert np.max(rep.residual_tolerance) > rep.tolerance
    assert rep.verdict

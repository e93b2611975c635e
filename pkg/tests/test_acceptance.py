"""End-to-end acceptance criteria.

Each test prints one ``PASS``/``FAIL`` line (visible even under output
capture) before asserting.  Run just this file with
``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import itertools
import json
import math
import sys
import time

import numpy as np
import pytest

from bspde_smp.cli import main as cli_main
from bspde_smp.feynman_kac import fk_value, g_spec, theta_spec
from bspde_smp.meanfield import PAPER_VALUES, example_e_residual, solve_fixed_point
from bspde_smp.problem import ControlPolicy
from bspde_smp.sde import McConfig, derive_seed, estimate_cost
from bspde_smp.smp import (ExtendedCostate, SpikePerturbation, TerminalCostate, example_e_costate,
                           minimize_extended_hamiltonian, smp_report, spike_difference_check)
from bspde_smp.three_step import (GridConfig, example_e_frozen, gamma0_kernel, manufactured, pde_residual,
                                  run_three_step, solve_by_kernel, solve_decoupling_pde)

SEED = 20240601


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return _report


def test_criterion_01_fixed_point(report):
    res = solve_fixed_point(example_e_residual, bracket=(-1.0, 0.0), tol=1e-10)
    best = math.inf
    for _ in range(20):
        t0 = time.perf_counter()
        solve_fixed_point(example_e_residual, bracket=(-1.0, 0.0), tol=1e-10)
        best = min(best, time.perf_counter() - t0)
    m = res.m_star[0]
    ok = abs(m - (-0.58462)) <= 1e-5 and abs(abs(m) - abs(PAPER_VALUES["m_star"])) <= 1e-5 and best < 1e-3
    report(1, ok, f"m* = {m:.10f}, runtime {best * 1e3:.3f} ms")


def test_criterion_02_objective(report, ex, closed, optimal):
    t0 = time.perf_counter()
    est = estimate_cost(ex, optimal, McConfig(1_000_000, 200, SEED))
    elapsed = time.perf_counter() - t0
    ok = (abs(closed.J - (-0.26898)) <= 1e-5 and abs(closed.J - est.mean) <= 3 * est.std_error
          and elapsed < 30.0)
    report(2, ok, f"J_formula = {closed.J:.6f}, J_mc = {est.mean:.6f} (SE {est.std_error:.2e}), "
                  f"{elapsed:.1f} s; printed value {PAPER_VALUES['J']} differs")


def test_criterion_03_feynman_kac(report, ex, closed, optimal):
    rng = np.random.default_rng(SEED)
    pts = list(zip(rng.uniform(0.0, 0.95, 10), rng.uniform(-2.0, 2.0, 10)))
    th, gs = theta_spec(ex, optimal), g_spec(ex, optimal)
    worst = 0.0
    for i, (t, x) in enumerate(pts):
        for j, (spec, exact) in enumerate(((th, float(closed.M(t))), (gs, x + closed.u_bar * (1 - t)))):
            est = fk_value(spec, float(t), [x], McConfig(100_000, 50, derive_seed(SEED, i, j)))
            worst = max(worst, abs(est.value - exact) / max(est.std_error, 1e-12 * max(1.0, abs(exact))))
    report(3, worst <= 3.0, f"max |fk - closed form| / SE = {worst:.2f} over 20 evaluations")


def test_criterion_04_spike_identity(report, ex, closed, optimal):
    costate = example_e_costate(closed)
    worst, worst_lhs, fails = 0.0, math.inf, []
    for i, (tau, eps, v) in enumerate(itertools.product((0.2, 0.5, 0.8), (0.2, 0.1, 0.05), (-2.0, 0.0, 1.0))):
        sp = SpikePerturbation(tau, eps, [v], optimal, ex.horizon)
        chk = spike_difference_check(ex, optimal, sp, McConfig(100_000, 100, derive_seed(SEED, 4, i)), costate)
        z = abs(chk.lhs - chk.rhs) / max(chk.combined_se, 1e-15)
        worst = max(worst, z)
        worst_lhs = min(worst_lhs, chk.lhs + 3 * chk.lhs_se)
        if not (chk.passed and chk.lhs_nonnegative):
            fails.append((tau, eps, v))
    report(4, not fails, f"27 spikes, max |lhs - rhs| / SE = {worst:.2f}, "
                         f"min lhs + 3 SE = {worst_lhs:.3g}, failures {fails}")


def test_criterion_05_variational_grid(report, ex, closed, optimal):
    good = smp_report(ex, optimal, example_e_costate(closed), closed.m_star, u_points=401,
                      tolerance=1e-10, seed=SEED)
    bad = smp_report(ex, ControlPolicy.constant(0.0), TerminalCostate(ex), [0.0], u_points=401, seed=SEED)
    ok = good.residuals.shape == (21, 401) and good.min_residual >= -1e-10 and bad.min_residual <= -0.05
    report(5, ok, f"optimum min residual {good.min_residual:.3g}, u = 0 min residual {bad.min_residual:.4f}")


def test_criterion_06_minimizer(report, ex):
    grid = np.linspace(-2.0, 2.0, 1_000_000)
    worst = 0.0
    for p in np.random.default_rng(SEED).uniform(-5.0, 5.0, 100):
        u, _ = minimize_extended_hamiltonian(ex, 0.0, [0.0], ExtendedCostate.from_p_eff(p))
        scan = grid[np.argmin(grid * p + 0.5 * (grid + 1.0) ** 2)]
        worst = max(worst, abs(u[0] - scan))
    report(6, worst <= 1e-5, f"max |clamp - scan| = {worst:.2e} over 100 values")


def test_criterion_07_manufactured_refinement(report):
    spec = manufactured()
    errs, res, secs = [], [], []
    for n, nt in ((41, 100), (81, 400), (161, 1600)):
        t0 = time.perf_counter()
        pde = solve_decoupling_pde(spec, GridConfig(L=2.0, n_xy=n, n_t=nt))
        secs.append(time.perf_counter() - t0)
        X, Y = np.meshgrid(pde.x, pde.x, indexing="ij")
        errs.append(max(float(np.max(np.abs(pde.theta[k] - spec.exact(t, X, Y)))) for k, t in enumerate(pde.t_grid)))
        res.append(pde_residual(pde, spec))
    er = [errs[i] / errs[i + 1] for i in range(2)]
    rr = [res[i] / res[i + 1] for i in range(2)]
    ok = all(3.0 <= r <= 5.0 for r in er + rr) and max(secs) < 60.0
    report(7, ok, f"error ratios {er[0]:.3f}, {er[1]:.3f}; residual ratios {rr[0]:.3f}, {rr[1]:.3f}; "
                  f"level times {', '.join(f'{s:.1f}' for s in secs)} s")


def test_criterion_08_frozen_example(report, closed):
    spec = example_e_frozen(closed.u_bar)
    grid = GridConfig(L=8.0, n_xy=81, n_t=200)
    sol = run_three_step(spec, grid, McConfig(1000, 200, SEED))
    th = sol.pde.theta
    flat = max(float(np.max(np.ptp(th, axis=1))), float(np.max(np.ptp(th, axis=2))))
    dev = max(float(np.max(np.abs(th[k] - closed.M(t)))) for k, t in enumerate(sol.pde.t_grid))
    terminal = np.array_equal(sol.p[-1], np.zeros_like(sol.p[-1]))
    qmax = float(np.max(np.abs(sol.q)))
    ok = flat <= 10 * grid.picard_tol and dev <= 5e-3 and terminal and qmax <= 5e-3
    report(8, ok, f"spatial variation {flat:.2e}, max |theta - M| {dev:.2e}, p(T) exact {terminal}, "
                  f"max |q| {qmax:.2e}")


def test_criterion_09_kernel(report):
    g = np.linspace(-20, 20, 2001)
    Z = np.stack(np.meshgrid(g, g, indexing="ij"), -1)
    mass = float(np.trapezoid(np.trapezoid(gamma0_kernel(0.0, [0.0, 0.0], 1.0, Z, np.eye(2)), g, axis=1), g))
    a = np.array([[1.0, 0.3], [0.3, 0.6]])
    X, Y = np.array([0.2, -0.1]), np.array([-0.4, 0.5])
    g2 = np.linspace(-12, 12, 801)
    Z2 = np.stack(np.meshgrid(g2, g2, indexing="ij"), -1)
    prod = gamma0_kernel(0.0, X, 0.4, Z2, a) * gamma0_kernel(0.0, Z2, 0.6, Y, a)
    ck = abs(float(np.trapezoid(np.trapezoid(prod, g2, axis=1), g2)) - gamma0_kernel(0.0, X, 1.0, Y, a))
    spec = manufactured(0.05)
    v, hist = solve_by_kernel(spec, 2.5, 41, 11, iterations=10, tol=1e-4)
    pde = solve_decoupling_pde(spec, GridConfig(L=2.5, n_xy=41))
    XX, YY = np.meshgrid(v.x, v.x, indexing="ij")
    agree = max(float(np.max(np.abs(v.theta[k] - pde.theta_at(t, XX, YY)))) for k, t in enumerate(v.t_grid))
    ok = abs(mass - 1.0) <= 1e-6 and ck <= 1e-4 and agree <= 5e-3 and hist[-1] <= 1e-4
    report(9, ok, f"mass {mass:.9f}, Chapman-Kolmogorov error {ck:.2e}, kernel vs grid {agree:.2e} "
                  f"after {len(hist)} iterations (update {hist[-1]:.1e})")


def test_criterion_10_determinism(report, tmp_path):
    codes = []
    for w in (1, 8):
        codes.append(cli_main(["example-e", "--workers", str(w), "--out", str(tmp_path / f"w{w}")]))
    a = (tmp_path / "w1" / "example_e_report.json").read_bytes()
    b = (tmp_path / "w8" / "example_e_report.json").read_bytes()
    ok = a == b and codes == [0, 0] and "workers" not in json.loads(a)["config"]
    report(10, ok, f"reports bit-identical: {a == b}, exit codes {codes}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))

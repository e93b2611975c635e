import math

import numpy as np
import pytest

from conftest import within
from bspde_smp.errors import BracketError, ConfigError, DivergenceError
from bspde_smp.feynman_kac import fk_value, g_spec, theta_spec
from bspde_smp.meanfield import (PAPER_VALUES, consistency_residual, example_e_closed_forms,
                                 example_e_residual, solve_fixed_point)
from bspde_smp.sde import McConfig


@pytest.mark.parametrize("m, r", [(0.0, 1.0), (-1.0, -math.exp(-1.0))])
def test_analytic_residual_examples(ex, m, r):
    assert example_e_residual(m) == pytest.approx(r, abs=1e-15)
    assert consistency_residual(ex, [m], analytic=True) == pytest.approx(r, abs=1e-15)


def test_analytic_residual_near_root(ex):
    assert abs(consistency_residual(ex, -0.58462, analytic=True)) <= 5e-5


def test_analytic_flag_only_for_builtin(ex):
    with pytest.raises(ConfigError):
        consistency_residual(ex.replace(name="other"), 0.0, analytic=True)
    with pytest.raises(ConfigError):
        consistency_residual(ex, 0.0)


def test_bisection_root():
    res = solve_fixed_point(example_e_residual, bracket=(-1.0, 0.0), tol=1e-10)
    m = res.m_star[0]
    assert res.method == "bisection" and res.converged
    assert abs(abs(m) - abs(PAPER_VALUES["m_star"])) < 5e-6
    assert abs(m - (-0.58462)) <= 1e-5
    assert res.residual <= 1e-9


@pytest.mark.parametrize("lo, hi, tol", [(-1.0, 0.0, 1e-10), (-1.0, 0.0, 1e-3), (-3.0, 0.5, 1e-8)])
def test_bisection_iteration_count(lo, hi, tol):
    res = solve_fixed_point(example_e_residual, bracket=(lo, hi), tol=tol)
    assert res.iterations == math.ceil(math.log2((hi - lo) / tol))


def test_degenerate_identity_residual():
    res = solve_fixed_point(lambda m: m, bracket=(-1.0, 1.0))
    assert res.m_star[0] == 0.0


def test_no_sign_change():
    with pytest.raises(BracketError):
        solve_fixed_point(lambda m: m * m + 1.0, bracket=(-1.0, 1.0))
    with pytest.raises(BracketError):
        solve_fixed_point(lambda m: m, bracket=(1.0, -1.0))


def test_multiple_roots_are_noted():
    res = solve_fixed_point(lambda m: (m - 0.2) * (m + 0.3) * (m - 0.7), bracket=(-1.0, 1.2))
    assert res.notes and "not be unique" in res.notes[0]


def test_damped_picard_monte_carlo(ex):
    cfg = McConfig(100_000, 4, 11)
    res = solve_fixed_point(lambda m: consistency_residual(ex, m, cfg), init=[0.0], tol=2e-3, max_iter=60)
    _, se = consistency_residual(ex, res.m_star, cfg, return_se=True)
    assert res.method == "damped_picard" and res.converged
    assert abs(res.m_star[0] - (-0.58462)) <= max(1e-3, 3 * se[0])


def test_picard_divergence():
    with pytest.raises(DivergenceError) as e:
        solve_fixed_point(lambda m: -m ** 3, init=[1.0], tol=1e-12, max_iter=5000)
    assert len(e.value.history) > 5


def test_picard_reports_nonconvergence():
    res = solve_fixed_point(lambda m: 0.01 * m, init=[1.0], tol=1e-12, max_iter=10)
    assert not res.converged and res.iterations == 10


def test_closed_forms(closed):
    assert abs(closed.u_bar - closed.m_star) <= 1e-12
    assert abs(closed.u_bar - (-0.58462)) <= 1e-5
    assert closed.M(1.0) == 0.0 and closed.L(1.0) == 0.0
    m = closed.m_star
    assert float(closed.M(0.0)) == pytest.approx(0.5 * m * m * math.exp(-2 * m * m), abs=1e-14)
    assert abs(closed.J - (-0.26898)) < 1e-5
    assert closed.J == pytest.approx(0.5 * m * m * math.exp(-2 * m * m) - 0.5 * math.exp(-m * m), abs=1e-14)
    assert abs(closed.J - PAPER_VALUES["J"]) > 0.01  # printed value disagrees with the formulas
    d = closed.to_dict()
    assert d["psi"] == 0.0 and d["N"] == 1.0


def test_closed_forms_hold_off_root():
    c = example_e_closed_forms(-0.3)
    assert c.u_bar == pytest.approx(0.3 * math.exp(-0.09) - 1.0)
    assert c.g(0.2, 1.0) == pytest.approx(1.0 + c.u_bar * 0.8)


def test_closed_forms_match_feynman_kac(ex, closed, optimal):
    rng = np.random.default_rng(123)
    ts, xs = rng.uniform(0.0, 0.95, 10), rng.uniform(-2.0, 2.0, 10)
    th, gs = theta_spec(ex, optimal), g_spec(ex, optimal)
    for i, (t, x) in enumerate(zip(ts, xs)):
        cfg = McConfig(4000, 20, 100 + i)
        a = fk_value(th, float(t), [x], cfg)
        b = fk_value(gs, float(t), [x], cfg)
        assert within(a.value, float(closed.theta(t, x)), a.std_error)
        assert within(b.value, float(closed.g(t, x)), b.std_error)

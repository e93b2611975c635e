import numpy as np
import pytest

from bspde_smp.meanfield import example_e_closed_forms, example_e_residual, solve_fixed_point
from bspde_smp.problem import ControlPolicy, build_example_e


@pytest.fixture(scope="session")
def ex():
    return build_example_e()


@pytest.fixture(scope="session")
def closed():
    m = solve_fixed_point(example_e_residual, bracket=(-1.0, 0.0), tol=1e-13).m_star
    return example_e_closed_forms(m)


@pytest.fixture(scope="session")
def optimal(closed):
    return ControlPolicy.constant(closed.u_bar)


def within(est, target, se, k=3.0):
    """Statistical agreement with a roundoff floor for zero-variance estimators."""
    return abs(est - target) <= k * se + 1e-12 * max(1.0, abs(target))

"""Coefficients of the coupled forward-backward system and built-in instances.

The grid solver handles one state and one noise dimension, so every callable
acts elementwise on numpy arrays: ``b_bar(t, x, p)``, ``sigma_bar(t, x)``,
``f_bar(t, x, p)`` and ``F_bar(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import ConfigError


def _arr(v, shape) -> np.ndarray:
    return np.broadcast_to(np.asarray(v, dtype=float), shape)


@dataclass(frozen=True)
class FbspdeSpec:
    """``(b_bar, sigma_bar, f_bar, F_bar, T, x0)`` plus optional test hooks.

    ``terminal(x, y)``, ``forcing(t, x, y)`` and ``boundary(t, x, y)`` exist for
    manufactured solutions: they replace ``F_bar(x)`` as terminal data, add a
    source term, and impose Dirichlet data on the truncated domain's edge.
    ``forcing_terms`` optionally restates the forcing as pairs
    ``(a_i(t), g_i(x, y))`` with ``forcing = sum_i a_i(t) g_i(x, y)`` so a
    solver can tabulate the spatial factors once.
    """

    b_bar: Callable
    sigma_bar: Callable
    f_bar: Callable
    F_bar: Callable
    horizon: float
    initial_state: float = 0.0
    state_dim: int = 1
    noise_dim: int = 1
    name: str = "custom"
    forcing: Optional[Callable] = None
    terminal: Optional[Callable] = None
    boundary: Optional[Callable] = None
    exact: Optional[Callable] = None
    forcing_terms: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ConfigError(f"horizon must be positive, got {self.horizon}")

    def require_scalar(self):
        if self.state_dim != 1 or self.noise_dim != 1:
            raise ConfigError("the grid solver supports state_dim = noise_dim = 1 only")

    def b(self, t, x, p) -> np.ndarray:
        shape = np.broadcast(np.asarray(x), np.asarray(p)).shape
        return _arr(self.b_bar(t, x, p), shape)

    def sigma(self, t, x) -> np.ndarray:
        return _arr(self.sigma_bar(t, x), np.shape(x))

    def f(self, t, x, p) -> np.ndarray:
        shape = np.broadcast(np.asarray(x), np.asarray(p)).shape
        return _arr(self.f_bar(t, x, p), shape)

    def terminal_value(self, X, Y) -> np.ndarray:
        if self.terminal is not None:
            return np.array(_arr(self.terminal(X, Y), X.shape))
        return np.array(_arr(self.F_bar(X), X.shape))

    def source(self, t, X, Y, P) -> np.ndarray:
        """``f_bar(t, x, P) + forcing(t, x, y)`` on the grid."""
        out = self.f(t, X, P)
        if self.forcing is not None:
            out = out + self.forcing(t, X, Y)
        return out

    def forcing_on(self, X, Y) -> Callable:
        """``t -> forcing(t, X, Y)`` with the spatial factors tabulated when possible."""
        if self.forcing is None:
            return lambda t: 0.0
        if self.forcing_terms:
            tab = [(a, np.asarray(g(X, Y), dtype=float)) for a, g in self.forcing_terms]
            return lambda t: sum(a(t) * G for a, G in tab)
        return lambda t: self.forcing(t, X, Y)

    def p_dependent(self) -> bool:
        """Whether ``b_bar`` or ``f_bar`` change with ``p`` at probe points."""
        x = np.linspace(-2.0, 2.0, 5)
        for t in (0.0, 0.5 * self.horizon):
            for p0, p1 in ((0.0, 1.0), (-1.0, 2.0)):
                if np.any(self.b(t, x, p0) != self.b(t, x, p1)) or np.any(self.f(t, x, p0) != self.f(t, x, p1)):
                    return True
        return False


def constant_spec(c: float = 1.0, horizon: float = 1.0) -> FbspdeSpec:
    return FbspdeSpec(
        b_bar=lambda t, x, p: 0.0,
        sigma_bar=lambda t, x: 1.0,
        f_bar=lambda t, x, p: 0.0,
        F_bar=lambda x: c,
        horizon=horizon,
        name="constant",
        params={"c": c},
    )


def example_e_frozen(u_bar: Optional[float] = None, horizon: float = 1.0) -> FbspdeSpec:
    """Built-in example with the optimal constant control frozen in.

    ``theta(t, x, y) = ½(u_bar + 1)²(T - t)`` is the exact solution.
    """
    if u_bar is None:
        from ..meanfield import example_e_closed_forms, example_e_residual, solve_fixed_point

        m = solve_fixed_point(example_e_residual, bracket=(-1.0, 0.0), tol=1e-13).m_star
        u_bar = example_e_closed_forms(m).u_bar
    u = float(u_bar)
    run = 0.5 * (u + 1.0) ** 2
    return FbspdeSpec(
        b_bar=lambda t, x, p: u,
        sigma_bar=lambda t, x: 1.0,
        f_bar=lambda t, x, p: run,
        F_bar=lambda x: 0.0,
        horizon=horizon,
        name="example_e_frozen",
        exact=lambda t, x, y: run * (horizon - np.asarray(t, dtype=float)) + 0.0 * np.asarray(x) + 0.0 * np.asarray(y),
        params={"u_bar": u, "horizon": horizon},
    )


def _ms_theta(t, x, y):
    return math.exp(-t) * np.sin(x) * np.cos(y)


def _ms_forcing(t, x, y):
    e = math.exp(-t)
    sx, cx, sy, cy = np.sin(x), np.cos(x), np.sin(y), np.cos(y)
    th = e * sx * cy
    P = e * cy * cy  # theta_x on the diagonal x = y
    th_x = e * cx * cy
    th_y = -e * sx * sy
    th_xy = -e * cx * sy
    # theta_t = -th, theta_xx = theta_yy = -th
    return -(-th + P * (th_x + th_y) - th + th_xy)


# the same forcing split as e^{-t} g1(x, y) + e^{-2t} g2(x, y)
_MS_TERMS = (
    (lambda t: math.exp(-t), lambda x, y: 2 * np.sin(x) * np.cos(y) + np.cos(x) * np.sin(y)),
    (lambda t: math.exp(-2 * t), lambda x, y: -np.cos(y) ** 2 * (np.cos(x) * np.cos(y) - np.sin(x) * np.sin(y))),
)


def manufactured(horizon: float = 0.25) -> FbspdeSpec:
    """``theta*(t, x, y) = e^{-t} sin x cos y`` with ``sigma = 1`` and ``b(t, x, p) = p``."""
    return FbspdeSpec(
        b_bar=lambda t, x, p: p,
        sigma_bar=lambda t, x: 1.0,
        f_bar=lambda t, x, p: 0.0,
        F_bar=lambda x: math.exp(-horizon) * np.sin(x),
        horizon=horizon,
        name="manufactured",
        forcing=_ms_forcing,
        forcing_terms=_MS_TERMS,
        terminal=lambda x, y: _ms_theta(horizon, x, y),
        boundary=_ms_theta,
        exact=_ms_theta,
        params={"horizon": horizon},
    )


BUILTIN_SPECS = {
    "example_e_frozen": example_e_frozen,
    "manufactured": manufactured,
    "constant": constant_spec,
}


def spec_from_name(name: str, **kw) -> FbspdeSpec:
    if name not in BUILTIN_SPECS:
        raise ConfigError(f"unknown builtin spec {name!r}; choose from {sorted(BUILTIN_SPECS)}")
    return BUILTIN_SPECS[name](**kw)

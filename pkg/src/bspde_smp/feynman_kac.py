"""Monte Carlo evaluation of linear backward random fields.

A field ``p`` solving the linear backward equation with drift ``b``,
diffusion ``sigma``, source ``l`` and terminal value ``h`` is evaluated as

    p(t, x) = E[ ∫_t^T l(s, X(s)) ds + h(X(T)) ],   X(t) = x,

with ``X`` simulated by Euler-Maruyama.  Spatial gradients use central
differences with common random numbers: the shifted start points share the
exact same Brownian increments, so the difference quotient is a per-path
quantity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .sde import Dynamics, McConfig, derive_seed, run_paths

# fk_value at t within this distance of T uses the terminal shortcut
TERMINAL_EPS = 1e-12


@dataclass(frozen=True)
class LinearBspdeSpec:
    """Coefficients ``(b, sigma, l, h)`` of a linear backward field on ``[0, T]``."""

    drift: Callable
    diffusion: Callable
    source: Callable
    terminal: Callable
    horizon: float
    state_dim: int
    noise_dim: int
    label: str = ""

    def dynamics(self) -> Dynamics:
        return Dynamics(
            drift=lambda t, x, u: self.drift(t, x),
            diffusion=self.diffusion,
            state_dim=self.state_dim,
            noise_dim=self.noise_dim,
            running=lambda t, x, u: self.source(t, x),
        )

    def h(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.broadcast_to(np.asarray(self.terminal(x), dtype=float), x.shape[:-1])


@dataclass(frozen=True)
class FieldEstimate:
    value: float
    std_error: float
    n_paths_used: int
    gradient: Optional[np.ndarray] = None
    gradient_std_error: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        out = {"value": self.value, "std_error": self.std_error, "n_paths_used": self.n_paths_used}
        if self.gradient is not None:
            out["gradient"] = self.gradient.tolist()
            out["gradient_std_error"] = self.gradient_std_error.tolist()
        return out


def _frozen(problem, policy):
    def drift(t, x):
        return problem.b(t, x, policy(t, x))

    return drift


def theta_spec(problem, policy) -> LinearBspdeSpec:
    """Value field of the running plus terminal cost under a frozen control."""
    return LinearBspdeSpec(
        drift=_frozen(problem, policy),
        diffusion=problem.sigma,
        source=lambda t, x: problem.f(t, x, policy(t, x)),
        terminal=problem.h,
        horizon=problem.horizon,
        state_dim=problem.state_dim,
        noise_dim=problem.noise_dim,
        label="theta",
    )


def g_spec(problem, policy, i: int = 0) -> LinearBspdeSpec:
    """Field whose value is the conditional mean of the i-th terminal coordinate."""
    return LinearBspdeSpec(
        drift=_frozen(problem, policy),
        diffusion=problem.sigma,
        source=lambda t, x: 0.0,
        terminal=lambda x: x[..., i],
        horizon=problem.horizon,
        state_dim=problem.state_dim,
        noise_dim=problem.noise_dim,
        label=f"g{i}",
    )


def g_tilde_spec(problem, policy, i: int = 0) -> LinearBspdeSpec:
    """``g_i(t, x) - x_i``: zero terminal value, source equal to the i-th drift."""
    drift = _frozen(problem, policy)
    return LinearBspdeSpec(
        drift=drift,
        diffusion=problem.sigma,
        source=lambda t, x: drift(t, x)[..., i],
        terminal=lambda x: 0.0,
        horizon=problem.horizon,
        state_dim=problem.state_dim,
        noise_dim=problem.noise_dim,
        label=f"g_tilde{i}",
    )


def _samples(spec: LinearBspdeSpec, t: float, starts: np.ndarray, cfg: McConfig,
             workers: int) -> np.ndarray:
    out = run_paths(spec.dynamics(), t, spec.horizon, None, cfg, workers=workers, starts=starts)
    k, p, n = out["terminal"].shape
    h = spec.h(out["terminal"].reshape(k * p, n)).reshape(k, p)
    return out["running"] + h


def _mean_se(y: np.ndarray) -> tuple[float, float]:
    n = y.shape[-1]
    se = float(np.std(y, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return float(np.mean(y)), se


def _check_time(spec, t):
    if not (-TERMINAL_EPS <= t <= spec.horizon + TERMINAL_EPS):
        raise ConfigError(f"t={t} outside [0, {spec.horizon}]")


def fk_value(spec: LinearBspdeSpec, t: float, x, cfg: McConfig, workers: int = 1) -> FieldEstimate:
    """Monte Carlo value of the field at ``(t, x)``; exact ``h(x)`` at ``t = T``."""
    _check_time(spec, t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if t >= spec.horizon - TERMINAL_EPS:
        return FieldEstimate(value=float(spec.h(x)[0]), std_error=0.0, n_paths_used=0)
    y = _samples(spec, t, x[None, :], cfg, workers)[0]
    mean, se = _mean_se(y)
    return FieldEstimate(value=mean, std_error=se, n_paths_used=cfg.n_paths)


def default_fd_step(x) -> np.ndarray:
    return 1e-3 * np.maximum(1.0, np.abs(np.asarray(x, dtype=float)))


def fk_gradient(spec: LinearBspdeSpec, t: float, x, cfg: McConfig,
                fd_step=None, workers: int = 1) -> FieldEstimate:
    """Value and central-difference gradient under common random numbers."""
    _check_time(spec, t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.size
    h = default_fd_step(x) if fd_step is None else np.broadcast_to(np.asarray(fd_step, dtype=float), (n,))
    if np.any(h <= 0):
        raise ConfigError("fd_step must be positive")
    starts = [x]
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        starts += [x + e, x - e]
    starts = np.stack(starts)
    if t >= spec.horizon - TERMINAL_EPS:
        hv = spec.h(starts)
        grad = np.array([(hv[1 + 2 * i] - hv[2 + 2 * i]) / (2 * h[i]) for i in range(n)])
        return FieldEstimate(value=float(hv[0]), std_error=0.0, n_paths_used=0,
                             gradient=grad, gradient_std_error=np.zeros(n))
    y = _samples(spec, t, starts, cfg, workers)
    value, se = _mean_se(y[0])
    grad = np.empty(n)
    gse = np.empty(n)
    for i in range(n):
        diff = (y[1 + 2 * i] - y[2 + 2 * i]) / (2 * h[i])
        grad[i], gse[i] = _mean_se(diff)
    return FieldEstimate(value=value, std_error=se, n_paths_used=cfg.n_paths,
                         gradient=grad, gradient_std_error=gse)


def fk_field_on_grid(spec: LinearBspdeSpec, t: float, x_grid, cfg: McConfig, *,
                     gradient: bool = False, fd_step=None, workers: int = 1) -> list[FieldEstimate]:
    """Pointwise estimates; point ``i`` uses seed ``derive_seed(cfg.seed, i)``."""
    pts = np.asarray(x_grid, dtype=float)
    pts = pts.reshape(-1, spec.state_dim)
    out = []
    for i, x in enumerate(pts):
        ci = cfg.replace(seed=derive_seed(cfg.seed, i))
        if gradient:
            out.append(fk_gradient(spec, t, x, ci, fd_step=fd_step, workers=workers))
        else:
            out.append(fk_value(spec, t, x, ci, workers=workers))
    return out


def field_to_csv(path, t: float, x_grid, estimates: list[FieldEstimate]) -> None:
    """Columns: t, x0..x{n-1}, value, std_error, grad0..grad{n-1}."""
    pts = np.asarray(x_grid, dtype=float)
    pts = pts.reshape(len(estimates), -1)
    n = pts.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i}" for i in range(n)] + ["value", "std_error"] + [f"grad{i}" for i in range(n)])
        for x, est in zip(pts, estimates):
            grad = [] if est.gradient is None else [repr(float(g)) for g in est.gradient]
            grad += [""] * (n - len(grad))
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(est.value), repr(est.std_error)] + grad)

"""Finite-difference solver for the decoupling field theta(t, x, y).

With ``P(t, y) = theta_x(t, y, y)`` the field solves, backward from
``theta(T, x, y) = F(x)``,

    theta_t + b(t, y, P) theta_y + b(t, x, P) theta_x
            + ½ s(x)² theta_xx + ½ s(y)² theta_yy + s(x) s(y) theta_xy + f(t, x, P) = 0.

Each backward sweep freezes ``P`` at the previous sweep's values and takes
explicit Euler steps; sweeps repeat until the sup-norm change is below
``picard_tol``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from ..errors import CFLError, ConfigError, DivergenceError
from .spec import FbspdeSpec

MAGIC = b"BSPDEGRD"


@dataclass(frozen=True)
class GridConfig:
    L: float = 8.0
    n_xy: int = 81
    n_t: Optional[int] = None
    picard_tol: float = 1e-8
    picard_max: int = 50
    max_saved: int = 200
    cfl_safety: float = 0.9

    def __post_init__(self):
        if not self.L > 0:
            raise ConfigError("L must be positive")
        if self.n_xy < 5:
            raise ConfigError("n_xy must be at least 5")
        if self.n_t is not None and self.n_t < 1:
            raise ConfigError("n_t must be positive")
        if self.picard_max < 1 or not self.picard_tol > 0:
            raise ConfigError("picard_max must be >= 1 and picard_tol > 0")

    def replace(self, **kw) -> "GridConfig":
        return GridConfig(**{**self.__dict__, **kw})


def d1(U: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Central first difference, second-order one-sided at the edges."""
    return np.gradient(U, h, axis=axis, edge_order=2)


def d2(U: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Three-point second difference, second-order one-sided at the edges."""
    V = np.moveaxis(U, axis, 0)
    out = np.empty_like(V)
    out[1:-1] = (V[2:] - 2 * V[1:-1] + V[:-2]) / h ** 2
    out[0] = (2 * V[0] - 5 * V[1] + 4 * V[2] - V[3]) / h ** 2
    out[-1] = (2 * V[-1] - 5 * V[-2] + 4 * V[-3] - V[-4]) / h ** 2
    return np.moveaxis(out, 0, axis)


def diag_grad(U: np.ndarray, h: float) -> np.ndarray:
    """``theta_x`` at the diagonal nodes ``(y_j, y_j)`` of one time level."""
    N = U.shape[0]
    j = np.arange(1, N - 1)
    out = np.empty(N)
    out[1:-1] = (U[j + 1, j] - U[j - 1, j]) / (2 * h)
    out[0] = (-3 * U[0, 0] + 4 * U[1, 0] - U[2, 0]) / (2 * h)
    out[-1] = (3 * U[-1, -1] - 4 * U[-2, -1] + U[-3, -1]) / (2 * h)
    return out


def _lerp(a, b, w):
    # a + w (b - a) returns a (or b) exactly when the two agree
    return a + w * (b - a)


@dataclass
class PdeSolution:
    """Decoupling field on saved time levels of a uniform (t, x, y) grid.

    ``theta[k, i, j]`` is the value at ``(t_grid[k], x[i], x[j])``;
    ``diag_grad[m, j]`` holds ``theta_x(t, y_j, y_j)`` at every solver step.
    """

    t_grid: np.ndarray
    x: np.ndarray
    theta: np.ndarray
    step_times: np.ndarray
    diag_grad: np.ndarray
    L: float
    picard_iterations: int = 0
    update_history: list = field(default_factory=list)
    max_cfl: float = 0.0
    warnings: list = field(default_factory=list)

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dt(self) -> float:
        return float(self.step_times[1] - self.step_times[0])

    @property
    def n_t(self) -> int:
        return len(self.step_times) - 1

    @property
    def final_update(self) -> float:
        return self.update_history[-1] if self.update_history else 0.0

    @cached_property
    def theta_x(self) -> np.ndarray:
        return d1(self.theta, self.h, 1)

    @cached_property
    def theta_y(self) -> np.ndarray:
        return d1(self.theta, self.h, 2)

    @cached_property
    def theta_xx(self) -> np.ndarray:
        return d2(self.theta, self.h, 1)

    @cached_property
    def theta_yy(self) -> np.ndarray:
        return d2(self.theta, self.h, 2)

    @cached_property
    def theta_xy(self) -> np.ndarray:
        return d1(self.theta_x, self.h, 2)

    def metadata(self) -> dict:
        return {
            "L": self.L,
            "n_xy": len(self.x),
            "h": self.h,
            "n_t": self.n_t,
            "dt": self.dt,
            "saved_levels": len(self.t_grid),
            "picard_iterations": self.picard_iterations,
            "update_history": list(self.update_history),
            "final_update": self.final_update,
            "max_cfl": self.max_cfl,
        }

    def _time_bracket(self, t: float, times: np.ndarray):
        k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1))
        if k == len(times) - 1 or abs(t - times[k]) <= 1e-12 * max(1.0, abs(t)):
            return k, k, 0.0
        return k, k + 1, (t - times[k]) / (times[k + 1] - times[k])

    def _clamp(self, y, what: str):
        y = np.asarray(y, dtype=float)
        lo, hi = self.x[0], self.x[-1]
        if np.any((y < lo) | (y > hi)) and len(self.warnings) < 20:
            self.warnings.append(f"{what}: {int(np.sum((y < lo) | (y > hi)))} points outside "
                                 f"[{lo:g}, {hi:g}] clamped")
        return np.clip(y, lo, hi)

    def _space_bracket(self, y):
        h = self.h
        pos = (y - self.x[0]) / h
        j = np.clip(np.floor(pos).astype(int), 0, len(self.x) - 2)
        w = np.clip(pos - j, 0.0, 1.0)
        return j, w

    def diag_at(self, t: float, y) -> np.ndarray:
        """Bilinear (t, y) interpolation of ``theta_x(t, y, y)``."""
        y = self._clamp(y, "diagonal gradient")
        k0, k1, wt = self._time_bracket(t, self.step_times)
        row = _lerp(self.diag_grad[k0], self.diag_grad[k1], wt)
        j, w = self._space_bracket(y)
        return _lerp(row[j], row[j + 1], w)

    def slice_along_y(self, field_values: np.ndarray, t: float, y) -> np.ndarray:
        """``field(t, x_i, y_p)`` for every grid x and each ``y_p``: shape ``(P, N)``."""
        y = self._clamp(np.atleast_1d(y), "forward state")
        k0, k1, wt = self._time_bracket(t, self.t_grid)
        lvl = _lerp(field_values[k0], field_values[k1], wt)
        j, w = self._space_bracket(y)
        return _lerp(lvl[:, j], lvl[:, j + 1], w[None, :]).T

    def field_at(self, field_values: np.ndarray, t: float, x, y) -> np.ndarray:
        """Bilinear-in-space, linear-in-time interpolation of a stored field."""
        x = np.clip(np.asarray(x, dtype=float), self.x[0], self.x[-1])
        y = np.clip(np.asarray(y, dtype=float), self.x[0], self.x[-1])
        k0, k1, wt = self._time_bracket(t, self.t_grid)
        lvl = _lerp(field_values[k0], field_values[k1], wt)
        i, wx = self._space_bracket(x)
        j, wy = self._space_bracket(y)
        a = _lerp(lvl[i, j], lvl[i + 1, j], wx)
        b = _lerp(lvl[i, j + 1], lvl[i + 1, j + 1], wx)
        return _lerp(a, b, wy)

    def theta_at(self, t: float, x, y) -> np.ndarray:
        return self.field_at(self.theta, t, x, y)

    # export -----------------------------------------------------------------

    def to_binary(self, path) -> None:
        """Magic, 4-byte header length, JSON header, float64 row-major theta."""
        header = {
            "dims": list(self.theta.shape),
            "L": self.L,
            "spacings": [float(self.t_grid[1] - self.t_grid[0]) if len(self.t_grid) > 1 else 0.0, self.h, self.h],
            "t_grid": self.t_grid.tolist(),
            "dtype": "<f8",
            "order": "t,x,y",
        }
        raw = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(raw).to_bytes(4, "little"))
            fh.write(raw)
            fh.write(np.ascontiguousarray(self.theta, dtype="<f8").tobytes())

    def to_csv_slice(self, path, k: int = 0) -> None:
        """Columns ``t, x, y, theta`` for saved level ``k``."""
        X, Y = np.meshgrid(self.x, self.x, indexing="ij")
        t = np.full(X.size, self.t_grid[k])
        data = np.column_stack([t, X.ravel(), Y.ravel(), self.theta[k].ravel()])
        np.savetxt(path, data, delimiter=",", header="t,x,y,theta", comments="", fmt="%.17g")


def read_grid(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigError(f"{path} is not a grid file")
        n = int.from_bytes(fh.read(4), "little")
        header = json.loads(fh.read(n).decode())
        data = np.frombuffer(fh.read(), dtype=header["dtype"]).reshape(header["dims"])
    return header, data


# ---------------------------------------------------------------------------
# solver


def _mesh(grid: GridConfig):
    x = np.linspace(-grid.L, grid.L, grid.n_xy)
    X, Y = np.meshgrid(x, x, indexing="ij")
    return x, X, Y, float(x[1] - x[0])


def _cfl_rate(spec, t, X, Y, P, h):
    Sx, Sy = spec.sigma(t, X), spec.sigma(t, Y)
    Bx, By = spec.b(t, X, P), spec.b(t, Y, P)
    return (Sx ** 2 + Sy ** 2 + np.abs(Sx * Sy)) / h ** 2 + (np.abs(Bx) + np.abs(By)) / h


def _first_order(B, D, c, up, dn, h):
    # central where the cell Peclet number allows it, upwind otherwise
    central = np.abs(B) * h <= 2 * D
    if np.all(central):
        return (up - dn) / (2 * h)
    return np.where(central, (up - dn) / (2 * h), np.where(B > 0, up - c, c - dn) / h)


def _operator(U, t, spec, Xi, Yi, Pi, h, forcing):
    """Interior value of the spatial operator plus source; also the CFL rate."""
    Sx, Sy = spec.sigma(t, Xi), spec.sigma(t, Yi)
    Bx, By = spec.b(t, Xi, Pi), spec.b(t, Yi, Pi)
    c = U[1:-1, 1:-1]
    xp, xm = U[2:, 1:-1], U[:-2, 1:-1]
    yp, ym = U[1:-1, 2:], U[1:-1, :-2]
    Dx, Dy = 0.5 * Sx ** 2, 0.5 * Sy ** 2
    ux = _first_order(Bx, Dx, c, xp, xm, h)
    uy = _first_order(By, Dy, c, yp, ym, h)
    c2 = 2 * c
    out = Bx * ux + By * uy + (Dx / h ** 2) * (xp - c2 + xm) + (Dy / h ** 2) * (yp - c2 + ym)
    out += (Sx * Sy / (4 * h ** 2)) * (U[2:, 2:] - U[2:, :-2] - U[:-2, 2:] + U[:-2, :-2])
    out += spec.f(t, Xi, Pi) + forcing(t)
    rate = np.max((Sx ** 2 + Sy ** 2 + np.abs(Sx * Sy)) / h ** 2) + np.max(np.abs(Bx) + np.abs(By)) / h
    return out, float(rate)


def apply_boundary(U, t, spec, X, Y):
    if spec.boundary is not None:
        for idx in (np.s_[0, :], np.s_[-1, :], np.s_[:, 0], np.s_[:, -1]):
            U[idx] = spec.boundary(t, X[idx], Y[idx])
        return U
    U[0, :] = 2 * U[1, :] - U[2, :]
    U[-1, :] = 2 * U[-2, :] - U[-3, :]
    U[:, 0] = 2 * U[:, 1] - U[:, 2]
    U[:, -1] = 2 * U[:, -2] - U[:, -3]
    return U


def _save_stride(n_t: int, max_saved: int) -> int:
    target = max(1, n_t // max_saved)
    return max(s for s in range(1, target + 1) if n_t % s == 0)


def admissible_dt(spec: FbspdeSpec, grid: GridConfig, P=None) -> float:
    """Largest explicit step allowed by the CFL bound with diagonal gradient ``P``."""
    x, X, Y, h = _mesh(grid)
    if P is None:
        P = diag_grad(spec.terminal_value(X, Y), h)
    rate = max(float(np.max(_cfl_rate(spec, t, X, Y, P[None, :], h)))
               for t in np.linspace(0.0, spec.horizon, 11))
    return 1.0 / rate


class _CflViolation(Exception):
    def __init__(self, rate):
        self.rate = rate


def _sweep(spec, X, Y, h, n_t, stride, P_prev, theta_T):
    T = spec.horizon
    dt = T / n_t
    Xi, Yi = X[1:-1, 1:-1], Y[1:-1, 1:-1]
    forcing = spec.forcing_on(Xi, Yi)
    U = theta_T.copy()
    saved = np.empty((n_t // stride + 1,) + U.shape)
    saved[-1] = U
    P_new = np.empty_like(P_prev)
    P_new[n_t] = diag_grad(U, h)
    max_rate = 0.0
    for k in range(n_t - 1, -1, -1):
        t1 = T * (k + 1) / n_t
        R, rate = _operator(U, t1, spec, Xi, Yi, P_prev[k + 1][None, 1:-1], h, forcing)
        max_rate = max(max_rate, rate)
        if dt * rate > 1.0 + 1e-12:
            raise _CflViolation(rate)
        V = U.copy()
        V[1:-1, 1:-1] += dt * R
        U = apply_boundary(V, T * k / n_t, spec, X, Y)
        P_new[k] = diag_grad(U, h)
        if k % stride == 0:
            saved[k // stride] = U
    return saved, P_new, max_rate * dt


def solve_decoupling_pde(spec: FbspdeSpec, grid: Optional[GridConfig] = None) -> PdeSolution:
    """Backward explicit sweeps with a lagged diagonal gradient (Picard in sweeps).

    ``grid.n_t = None`` picks the step from the CFL bound; an explicit ``n_t``
    that violates it raises ``CFLError`` carrying the admissible step.
    Non-convergence within ``picard_max`` sweeps raises ``DivergenceError``.
    """
    grid = grid or GridConfig()
    spec.require_scalar()
    x, X, Y, h = _mesh(grid)
    T = spec.horizon
    theta_T = spec.terminal_value(X, Y)
    P0 = diag_grad(theta_T, h)
    dt_adm = admissible_dt(spec, grid, P0)
    auto = grid.n_t is None
    if auto:
        n_t = max(1, math.ceil(T / (grid.cfl_safety * dt_adm)))
    else:
        n_t = grid.n_t
        if T / n_t > dt_adm * (1 + 1e-12):
            raise CFLError(T / n_t, dt_adm)
    for _attempt in range(8):
        stride = _save_stride(n_t, grid.max_saved)
        P_prev = np.broadcast_to(P0, (n_t + 1, len(x))).copy()
        prev_saved = np.broadcast_to(theta_T, (n_t // stride + 1,) + theta_T.shape)
        history = []
        try:
            for sweep in range(1, grid.picard_max + 1):
                saved, P_prev, cfl = _sweep(spec, X, Y, h, n_t, stride, P_prev, theta_T)
                upd = float(np.max(np.abs(saved - prev_saved)))
                history.append(upd)
                if not math.isfinite(upd):
                    raise DivergenceError("Picard sweep produced non-finite values", history)
                prev_saved = saved
                if upd <= grid.picard_tol:
                    break
            else:
                raise DivergenceError(
                    f"no convergence in {grid.picard_max} Picard sweeps (last update {history[-1]:.3g})", history)
        except _CflViolation as v:
            if not auto:
                raise CFLError(T / n_t, 1.0 / v.rate) from None
            n_t = math.ceil(T * v.rate / grid.cfl_safety)
            continue
        step_times = T * np.arange(n_t + 1) / n_t
        return PdeSolution(
            t_grid=step_times[::stride].copy(), x=x, theta=saved, step_times=step_times, diag_grad=P_prev,
            L=grid.L, picard_iterations=len(history), update_history=history, max_cfl=cfl,
        )
    raise CFLError(T / n_t, dt_adm)


def inject_exact(spec: FbspdeSpec, grid: GridConfig, fn=None) -> PdeSolution:
    """PdeSolution holding exact values ``fn(t, x, y)`` on the solver's grid."""
    fn = fn or spec.exact
    if fn is None:
        raise ConfigError("no exact solution available")
    x, X, Y, h = _mesh(grid)
    T = spec.horizon
    n_t = grid.n_t or max(1, math.ceil(T / (grid.cfl_safety * admissible_dt(spec, grid))))
    stride = _save_stride(n_t, grid.max_saved)
    step_times = T * np.arange(n_t + 1) / n_t
    t_grid = step_times[::stride].copy()
    theta = np.stack([np.broadcast_to(fn(t, X, Y), X.shape) for t in t_grid]).astype(float)
    theta[-1] = spec.terminal_value(X, Y)
    diag = np.stack([np.diagonal(d1(np.broadcast_to(fn(t, X, Y), X.shape).astype(float), h, 0))
                     for t in step_times])
    return PdeSolution(t_grid=t_grid, x=x, theta=theta, step_times=step_times, diag_grad=diag, L=grid.L)


def residual_field(pde: PdeSolution, spec: FbspdeSpec) -> np.ndarray:
    """PDE residual at interior saved levels and interior nodes: ``(K-2, N-2, N-2)``."""
    if len(pde.t_grid) < 3:
        raise ConfigError("need at least three saved time levels")
    h = pde.h
    X, Y = np.meshgrid(pde.x, pde.x, indexing="ij")
    Xi, Yi = X[1:-1, 1:-1], Y[1:-1, 1:-1]
    th = pde.theta
    out = np.empty((len(pde.t_grid) - 2,) + Xi.shape)
    for k in range(1, len(pde.t_grid) - 1):
        t = float(pde.t_grid[k])
        U = th[k]
        ut = (th[k + 1] - th[k - 1]) / (pde.t_grid[k + 1] - pde.t_grid[k - 1])
        P = diag_grad(U, h)[None, 1:-1]
        ux = (U[2:, 1:-1] - U[:-2, 1:-1]) / (2 * h)
        uy = (U[1:-1, 2:] - U[1:-1, :-2]) / (2 * h)
        uxx = (U[2:, 1:-1] - 2 * U[1:-1, 1:-1] + U[:-2, 1:-1]) / h ** 2
        uyy = (U[1:-1, 2:] - 2 * U[1:-1, 1:-1] + U[1:-1, :-2]) / h ** 2
        uxy = (U[2:, 2:] - U[2:, :-2] - U[:-2, 2:] + U[:-2, :-2]) / (4 * h ** 2)
        Sx, Sy = spec.sigma(t, Xi), spec.sigma(t, Yi)
        out[k - 1] = (ut[1:-1, 1:-1] + spec.b(t, Xi, P) * ux + spec.b(t, Yi, P) * uy
                      + 0.5 * Sx ** 2 * uxx + 0.5 * Sy ** 2 * uyy + Sx * Sy * uxy
                      + spec.source(t, Xi, Yi, P))
    return out


def pde_residual(pde: PdeSolution, spec: FbspdeSpec) -> float:
    """Max absolute finite-difference residual over the interior of the grid."""
    return float(np.max(np.abs(residual_field(pde, spec))))


def decoupled_drift(pde: PdeSolution, spec: FbspdeSpec, t: float, y) -> np.ndarray:
    """``b(t, y, theta_x(t, y, y))``; points outside the grid are clamped with a warning."""
    y = np.asarray(y, dtype=float)
    return spec.b(t, y, pde.diag_at(t, y))

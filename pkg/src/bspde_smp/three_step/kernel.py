"""Gaussian fundamental solution and the integral-equation Picard map.

For frozen diffusion ``a`` (a 2n x 2n SPD matrix) the kernel

    G0(t, X; s, Z) = (4 pi (s-t))^{-n} det(a)^{-1/2} exp(-<a^{-1}(X-Z), X-Z> / (4 (s-t)))

is the density of ``N(X, 2 (s-t) a)``, so integrals against it are computed
by tensor trapezoid rules in the coordinates ``Z = X + chol(2 (s-t) a) xi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigError, QuadratureError
from .grid import PdeSolution, d1, diag_grad
from .spec import FbspdeSpec


def _check_spd(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] % 2:
        raise ConfigError("a_matrix must be a square matrix of even size 2n")
    if not np.allclose(a, a.T, rtol=1e-12, atol=1e-14):
        raise ConfigError("a_matrix must be symmetric")
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise ConfigError("a_matrix must be positive definite (regularise a singular a)") from None
    return a


def gamma0_kernel(t: float, X, s: float, Z, a_matrix) -> np.ndarray:
    """Kernel value for ``Z`` of shape ``(..., 2n)``; requires ``s > t``."""
    if not s > t:
        raise ConfigError("gamma0_kernel requires s > t")
    a = _check_spd(a_matrix)
    n = a.shape[0] // 2
    d = np.asarray(Z, dtype=float) - np.asarray(X, dtype=float)
    tau = s - t
    quad = np.einsum("...i,...i->...", d, np.linalg.solve(a, d[..., None])[..., 0]
                     if d.ndim > 1 else np.linalg.solve(a, d))
    norm = (4 * math.pi * tau) ** (-n) / math.sqrt(np.linalg.det(a))
    return norm * np.exp(-quad / (4 * tau))


def block_a(spec: FbspdeSpec, t: float, x, y) -> np.ndarray:
    """``½ [[s(x)², s(y)s(x)], [s(x)s(y), s(y)²]]`` for scalar x, y arrays: ``(..., 2, 2)``."""
    sx, sy = spec.sigma(t, x), spec.sigma(t, y)
    return 0.5 * np.stack([np.stack([sx * sx, sy * sx], -1), np.stack([sx * sy, sy * sy], -1)], -2)


@dataclass(frozen=True)
class KernelQuadConfig:
    """Trapezoid nodes on ``[-R, R]`` per dimension in standardised coordinates."""

    R: float = 6.0
    nodes: int = 13
    min_mass: float = 1.0 - 1e-3

    def rule(self, dim: int = 2):
        g = np.linspace(-self.R, self.R, self.nodes)
        step = g[1] - g[0]
        w1 = np.exp(-0.5 * g * g) / math.sqrt(2 * math.pi) * step
        w1[[0, -1]] *= 0.5
        mesh = np.meshgrid(*[g] * dim, indexing="ij")
        xi = np.stack([m.ravel() for m in mesh], -1)
        w = np.prod(np.meshgrid(*[w1] * dim, indexing="ij"), axis=0).ravel()
        mass = float(w.sum())
        if mass < self.min_mass:
            raise QuadratureError(f"kernel mass on the quadrature box is {mass:.6f} < {self.min_mass}")
        return xi, w / mass, mass


def _chol2(a: np.ndarray) -> np.ndarray:
    """Closed-form Cholesky factors of a stack of 2x2 SPD matrices."""
    l11 = np.sqrt(a[..., 0, 0])
    l21 = a[..., 1, 0] / l11
    l22 = np.sqrt(a[..., 1, 1] - l21 ** 2)
    out = np.zeros_like(a)
    out[..., 0, 0], out[..., 1, 0], out[..., 1, 1] = l11, l21, l22
    return out


def _bilinear(F: np.ndarray, axis: np.ndarray, xq: np.ndarray, yq: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``F[..., N, N]`` with clamping at the edges."""
    N = len(axis)
    h = axis[1] - axis[0]
    px = np.clip((xq - axis[0]) / h, 0.0, N - 1.0)
    py = np.clip((yq - axis[0]) / h, 0.0, N - 1.0)
    i = np.minimum(px.astype(np.intp), N - 2)
    j = np.minimum(py.astype(np.intp), N - 2)
    wx, wy = px - i, py - j
    k = i * N + j
    k10, k01, k11 = k + N, k + 1, k + N + 1

    def one(G):
        flat = G.ravel()
        f00 = np.take(flat, k)
        a = f00 + wx * (np.take(flat, k10) - f00)
        f01 = np.take(flat, k01)
        return a + wy * (f01 + wx * (np.take(flat, k11) - f01) - a)

    if F.ndim == 2:
        return one(F)
    return np.stack([one(G) for G in F.reshape((-1, N, N))]).reshape(F.shape[:-2] + np.shape(xq))


def _linear(row: np.ndarray, axis: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.interp(q, axis, row)


def picard_kernel_step(v: PdeSolution, spec: FbspdeSpec, quad: Optional[KernelQuadConfig] = None,
                       eps_reg: Optional[float] = None, a_matrix=None) -> PdeSolution:
    """One update of the integral map on the levels and nodes of ``v``.

    ``theta(t_k, X) = E[F(Z_T)] + sum_{m >= k} ds_m E[g(s_m, Z_m)]`` with
    ``Z_m ~ N(X, 2 (s_m - t_k) (a + eps I))`` and
    ``g = <b(s, Z, v_x(s, phi(Z))), v_X(s, Z)> + f(s, z_x, v_x(s, phi(Z))) + forcing``.
    The ``m = k`` term is the integrand at ``X`` itself (left endpoint in s).
    ``eps_reg`` defaults to ``1e-3 * trace(a)``; ``a_matrix`` overrides the
    block matrix with a constant one.
    """
    quad = quad or KernelQuadConfig()
    spec.require_scalar()
    xi, w, _ = quad.rule(2)
    ax = v.x
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    xs, ys = X.ravel(), Y.ravel()
    times = v.t_grid
    K = len(times)
    T = spec.horizon
    vx = d1(v.theta, v.h, 1)
    vy = d1(v.theta, v.h, 2)
    diag = np.stack([np.diagonal(vx[m]) for m in range(K)])
    grads = np.stack([vx, vy], 1)
    if a_matrix is not None:
        a_fixed = _check_spd(a_matrix)
        if a_fixed.shape != (2, 2):
            raise ConfigError("a_matrix must be 2x2 for the scalar solver")

    def integrand(m, zx, zy):
        s = float(times[m])
        P = _linear(diag[m], ax, zy)
        gx, gy = _bilinear(grads[m], ax, zx, zy)
        out = spec.b(s, zx, P) * gx + spec.b(s, zy, P) * gy + spec.f(s, zx, P)
        if spec.forcing is not None:
            out = out + spec.forcing(s, zx, zy)
        return out

    out = np.empty_like(v.theta)
    out[-1] = spec.terminal_value(X, Y)
    for k in range(K - 1):
        t = float(times[k])
        a = np.broadcast_to(a_fixed, (xs.size, 2, 2)) if a_matrix is not None else block_a(spec, t, xs, ys)
        tr = a[:, 0, 0] + a[:, 1, 1]
        eps = 1e-3 * tr if eps_reg is None else np.full(xs.size, float(eps_reg))
        a = a + eps[:, None, None] * np.eye(2)

        def expect(fn, tau):
            C = _chol2(2 * tau * a)
            zx = xs[:, None] + C[:, 0, 0, None] * xi[None, :, 0]
            zy = ys[:, None] + C[:, 1, 0, None] * xi[None, :, 0] + C[:, 1, 1, None] * xi[None, :, 1]
            return fn(zx, zy) @ w

        acc = expect(lambda zx, zy: spec.terminal_value(zx, zy), T - t)
        acc += (times[k + 1] - t) * integrand(k, xs, ys)
        for m in range(k + 1, K - 1):
            acc += (times[m + 1] - times[m]) * expect(lambda zx, zy, m=m: integrand(m, zx, zy), times[m] - t)
        out[k] = acc.reshape(X.shape)
    return PdeSolution(t_grid=times.copy(), x=ax.copy(), theta=out, step_times=times.copy(),
                       diag_grad=np.stack([diag_grad(out[m], v.h) for m in range(K)]), L=v.L)


def kernel_initial_field(spec: FbspdeSpec, L: float, n_xy: int, n_levels: int) -> PdeSolution:
    """Starting field ``v(t, X) = terminal data`` on a uniform grid."""
    x = np.linspace(-L, L, n_xy)
    X, Y = np.meshgrid(x, x, indexing="ij")
    times = np.linspace(0.0, spec.horizon, n_levels)
    F = spec.terminal_value(X, Y)
    theta = np.broadcast_to(F, (n_levels,) + F.shape).copy()
    dg = np.broadcast_to(diag_grad(F, x[1] - x[0]), (n_levels, n_xy)).copy()
    return PdeSolution(t_grid=times, x=x, theta=theta, step_times=times.copy(), diag_grad=dg, L=L)


def solve_by_kernel(spec: FbspdeSpec, L: float, n_xy: int, n_levels: int, *, iterations: int = 10,
                    tol: float = 0.0, quad: Optional[KernelQuadConfig] = None,
                    eps_reg: Optional[float] = None) -> tuple[PdeSolution, list]:
    """Iterate the integral map from the terminal data; returns the field and update norms."""
    v = kernel_initial_field(spec, L, n_xy, n_levels)
    history = []
    for _ in range(iterations):
        new = picard_kernel_step(v, spec, quad, eps_reg)
        history.append(float(np.max(np.abs(new.theta - v.theta))))
        v = new
        if history[-1] <= tol:
            break
    v.picard_iterations = len(history)
    v.update_history = history
    return v, history

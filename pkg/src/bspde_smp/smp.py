"""Maximum-principle checks: Hamiltonian, extended costate, spike variations.

The extended costate along a trajectory is

    p_eff(t) = theta_x(t, X) + sum_i G_i(E[X(T)]) * g^i_x(t, X),

and a candidate control is optimal (to first order) when it minimises
``<b(t, X, u), p_eff> + f(t, X, u)`` over the control domain.  Costate fields
come from a *costate provider*: any callable ``(t, x) -> CostateSample`` with
``x`` of shape ``(P, n)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import minimize

from .errors import ConfigError, GridMismatchError
from .feynman_kac import fk_gradient, g_tilde_spec, theta_spec
from .problem import TIME_EPS, ControlDomain, ControlPolicy, ControlProblem, CostEstimate, check_policy_grid
from .sde import McConfig, derive_seed, problem_dynamics, run_paths, time_grid

_EPS = np.finfo(float).eps


def roundoff_floor(*values) -> float:
    """Absolute slack for comparisons whose statistical error is exactly zero."""
    return 64 * _EPS * max([1.0] + [abs(float(v)) for v in values])


# ---------------------------------------------------------------------------
# costate containers and providers


@dataclass(frozen=True)
class ExtendedCostate:
    theta_x: np.ndarray
    g_x: np.ndarray
    G_grad_at_terminal_mean: np.ndarray
    p_eff: np.ndarray

    @classmethod
    def build(cls, theta_x, g_x, G_grad) -> "ExtendedCostate":
        theta_x = np.atleast_1d(np.asarray(theta_x, dtype=float))
        n = theta_x.size
        g_x = np.asarray(g_x, dtype=float).reshape(n, n)
        G_grad = np.atleast_1d(np.asarray(G_grad, dtype=float))
        return cls(theta_x, g_x, G_grad, theta_x + g_x @ G_grad)

    @classmethod
    def from_p_eff(cls, p_eff) -> "ExtendedCostate":
        """Costate with ``theta_x = p_eff`` and no mean-field part."""
        p = np.atleast_1d(np.asarray(p_eff, dtype=float))
        return cls.build(p, np.eye(p.size), np.zeros(p.size))

    def recompute(self) -> np.ndarray:
        return self.theta_x + self.g_x @ self.G_grad_at_terminal_mean


@dataclass
class CostateSample:
    """Batched costate fields at states ``x`` (shape ``(P, n)``).

    ``g_x[p, j, i]`` is the j-th partial derivative of ``g^i``.
    """

    theta_x: np.ndarray
    g_x: np.ndarray
    g: np.ndarray
    theta_x_se: Optional[np.ndarray] = None
    g_x_se: Optional[np.ndarray] = None
    g_se: Optional[np.ndarray] = None

    def p_eff(self, G_grad) -> np.ndarray:
        return self.theta_x + np.einsum("pji,i->pj", self.g_x, np.asarray(G_grad, dtype=float))


def _zeros_like_sample(s: CostateSample) -> CostateSample:
    s.theta_x_se = np.zeros_like(s.theta_x) if s.theta_x_se is None else s.theta_x_se
    s.g_x_se = np.zeros_like(s.g_x) if s.g_x_se is None else s.g_x_se
    s.g_se = np.zeros_like(s.g) if s.g_se is None else s.g_se
    return s


class TerminalCostate:
    """``theta_x = h_x``, ``g_x = I``, ``g = x``.

    Exact when drift, diffusion and running cost do not depend on the state.
    """

    def __init__(self, problem: ControlProblem, fd_step: float = 1e-5, h_grad: Optional[Callable] = None):
        self.problem = problem
        self.fd_step = fd_step
        self.h_grad = h_grad

    def __call__(self, t, x) -> CostateSample:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[1]
        if self.h_grad is not None:
            grad = np.broadcast_to(np.asarray(self.h_grad(x), dtype=float), x.shape).copy()
        else:
            grad = np.empty_like(x)
            for i in range(n):
                e = np.zeros(n)
                e[i] = self.fd_step
                grad[:, i] = (self.problem.h(x + e) - self.problem.h(x - e)) / (2 * self.fd_step)
        g_x = np.broadcast_to(np.eye(n), (x.shape[0], n, n)).copy()
        return _zeros_like_sample(CostateSample(grad, g_x, x.copy()))


class AnalyticCostate:
    """Costate from closed-form fields ``fn(t, x) -> (theta_x, g_x, g)``."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def __call__(self, t, x) -> CostateSample:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        P, n = x.shape
        theta_x, g_x, g = self.fn(t, x)
        return _zeros_like_sample(CostateSample(
            np.broadcast_to(np.asarray(theta_x, dtype=float), (P, n)).copy(),
            np.broadcast_to(np.asarray(g_x, dtype=float), (P, n, n)).copy(),
            np.broadcast_to(np.asarray(g, dtype=float), (P, n)).copy(),
        ))


def example_e_costate(closed) -> AnalyticCostate:
    """Closed-form fields of the built-in example: ``theta_x = 0``, ``g_x = 1``."""
    return AnalyticCostate(lambda t, x: (0.0, 1.0, x + float(closed.L(t))))


class CostateLattice:
    """Monte Carlo costate fields on a (t, x) lattice, interpolated linearly.

    Node values come from ``fk_gradient`` on the value field and on
    ``g^i - x_i`` (source ``b^i``, terminal 0), which has far lower variance
    than ``g^i`` itself.  Nodes are computed lazily and cached.
    """

    def __init__(self, problem: ControlProblem, policy: ControlPolicy, cfg: McConfig,
                 t_nodes: Sequence[float], x_axes: Sequence[np.ndarray], *, fd_step=None, workers: int = 1):
        self.problem = problem
        self.policy = policy
        self.cfg = cfg
        self.t_nodes = np.asarray(t_nodes, dtype=float)
        if self.t_nodes[0] > 0 or self.t_nodes[-1] < problem.horizon - TIME_EPS:
            raise ConfigError("lattice time nodes must cover [0, T]")
        self.x_axes = [np.asarray(a, dtype=float) for a in x_axes]
        if len(self.x_axes) != problem.state_dim:
            raise ConfigError("need one x axis per state dimension")
        self.fd_step = fd_step
        self.workers = workers
        self.specs = [theta_spec(problem, policy)] + [g_tilde_spec(problem, policy, i)
                                                      for i in range(problem.state_dim)]
        self._cache: dict[int, list] = {}

    @classmethod
    def around_paths(cls, problem, policy, cfg: McConfig, *, n_t: int = 21, n_x: int = 9,
                     width: float = 4.0, pilot_paths: int = 4096, fd_step=None, workers: int = 1):
        """Lattice spanning ``mean ± width·std`` of a pilot batch of trajectories."""
        pilot = McConfig(pilot_paths, 50, derive_seed(cfg.seed, 0xC0))
        out = run_paths(problem_dynamics(problem, policy, with_cost=False), 0.0, problem.horizon,
                        problem.initial_state, pilot, keep_states=True, workers=workers)
        st = out["states"].reshape(-1, problem.state_dim)
        mu, sd = st.mean(axis=0), np.maximum(st.std(axis=0), 1e-3)
        axes = [np.linspace(m - width * s, m + width * s, n_x) for m, s in zip(mu, sd)]
        return cls(problem, policy, cfg, np.linspace(0.0, problem.horizon, n_t), axes,
                   fd_step=fd_step, workers=workers)

    def _node(self, k: int):
        if k in self._cache:
            return self._cache[k]
        t = float(self.t_nodes[k])
        T = self.problem.horizon
        n = self.problem.state_dim
        mesh = np.meshgrid(*self.x_axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        steps = max(1, math.ceil(self.cfg.n_steps * (T - t) / T - 1e-9))
        shape = tuple(a.size for a in self.x_axes)
        vals = np.empty((len(self.specs), len(pts)))
        grads = np.empty((len(self.specs), len(pts), n))
        vse = np.empty_like(vals)
        gse = np.empty_like(grads)
        for s, spec in enumerate(self.specs):
            for j, x in enumerate(pts):
                cfg = self.cfg.replace(n_steps=steps, seed=derive_seed(self.cfg.seed, k, j, s))
                est = fk_gradient(spec, t, x, cfg, fd_step=self.fd_step, workers=self.workers)
                vals[s, j], vse[s, j] = est.value, est.std_error
                grads[s, j], gse[s, j] = est.gradient, est.gradient_std_error
        # pack per x-point: theta_x (n), g_x (n*n), g_tilde (n), and their SEs
        packed = np.concatenate([
            grads[0], grads[1:].transpose(1, 2, 0).reshape(len(pts), n * n), vals[1:].T,
            gse[0], gse[1:].transpose(1, 2, 0).reshape(len(pts), n * n), vse[1:].T,
        ], axis=1)
        interp = RegularGridInterpolator(tuple(self.x_axes), packed.reshape(shape + (-1,)),
                                         method="linear") if all(a.size > 1 for a in self.x_axes) else None
        self._cache[k] = (packed, interp)
        return self._cache[k]

    def _at_node(self, k: int, x: np.ndarray) -> np.ndarray:
        packed, interp = self._node(k)
        if interp is None:
            return np.broadcast_to(packed[0], (x.shape[0], packed.shape[1]))
        lo = np.array([a[0] for a in self.x_axes])
        hi = np.array([a[-1] for a in self.x_axes])
        return interp(np.clip(x, lo, hi))

    def __call__(self, t, x) -> CostateSample:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[1]
        k = int(np.clip(np.searchsorted(self.t_nodes, t, side="right") - 1, 0, len(self.t_nodes) - 2))
        t0, t1 = self.t_nodes[k], self.t_nodes[k + 1]
        w = float(np.clip((t - t0) / (t1 - t0), 0.0, 1.0))
        a = self._at_node(k, x)
        if w > 0:
            a = (1 - w) * a + w * self._at_node(k + 1, x)
        P, nn = x.shape[0], n * n
        eye = np.eye(n)
        cuts = np.cumsum([n, nn, n, n, nn])
        th, gx, gt, th_se, gx_se, gt_se = np.split(a, cuts, axis=1)
        return CostateSample(
            theta_x=th, g_x=gx.reshape(P, n, n) + eye, g=x + gt,
            theta_x_se=th_se, g_x_se=gx_se.reshape(P, n, n), g_se=gt_se,
        )


# ---------------------------------------------------------------------------
# Hamiltonian and its minimisation


def hamiltonian(problem: ControlProblem, t, x, u, p, q) -> float:
    """``<b, p> + tr(sigma^T q) + f`` at a single point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    u = np.atleast_1d(np.asarray(u, dtype=float))[None, :]
    p = np.atleast_1d(np.asarray(p, dtype=float))
    q = np.asarray(q, dtype=float).reshape(problem.state_dim, problem.noise_dim)
    b = problem.b(t, x, u)[0]
    sig = problem.sigma(t, x)[0]
    return float(b @ p + np.sum(sig * q) + problem.f(t, x, u)[0])


def h_eff(problem: ControlProblem, t, x, u, p_eff) -> np.ndarray:
    """Batched ``<b(t, x, u), p_eff> + f(t, x, u)``; all inputs ``(P, .)``."""
    return np.einsum("pn,pn->p", problem.b(t, x, u), p_eff) + problem.f(t, x, u)


def _probe_offsets(l: int) -> np.ndarray:
    if l <= 6:
        corners = np.array(np.meshgrid(*[(-1.0, 1.0)] * l, indexing="ij")).reshape(l, -1).T
    else:
        corners = np.random.default_rng(0).choice([-1.0, 1.0], size=(32, l))
    inner = np.random.default_rng(1).uniform(-0.9, 0.9, size=(4, l))
    return np.vstack([corners, inner])


def _quadratic_fit(problem, t, x, p, domain: ControlDomain):
    """Separable quadratic model of the objective in u, fitted per row.

    Returns ``(u_star, value, ok)``; rows where the model fails the probe test
    have ``ok == False``.
    """
    P, l = x.shape[0], domain.control_dim
    lo, hi = domain.lower, domain.upper
    c = domain.center()
    half = 0.5 * (hi - lo)
    s = np.where(half > 0, 1e-2 * (hi - lo), 1.0)

    def phi(u):
        return h_eff(problem, t, x, np.broadcast_to(u, (P, l)), p)

    f0 = phi(c)
    g = np.empty((P, l))
    H = np.zeros((P, l, l))
    for j in range(l):
        e = np.zeros(l)
        e[j] = s[j]
        fp, fm = phi(c + e), phi(c - e)
        g[:, j] = (fp - fm) / (2 * s[j])
        H[:, j, j] = (fp - 2 * f0 + fm) / s[j] ** 2
    for j in range(l):
        for k in range(j + 1, l):
            ej, ek = np.zeros(l), np.zeros(l)
            ej[j], ek[k] = s[j], s[k]
            H[:, j, k] = H[:, k, j] = (phi(c + ej + ek) - phi(c + ej - ek) - phi(c - ej + ek)
                                       + phi(c - ej - ek)) / (4 * s[j] * s[k])
    scale = np.abs(f0) + 1.0
    ok = np.ones(P, dtype=bool)
    for off in _probe_offsets(l):
        d = off * half
        model = f0 + g @ d + 0.5 * np.einsum("pjk,j,k->p", H, d, d)
        actual = phi(c + d)
        scale = np.maximum(scale, np.abs(actual))
        ok &= np.abs(model - actual) <= 1e-8 * scale
    offdiag = H - H * np.eye(l)
    diag = np.einsum("pjj->pj", H)
    ok &= np.all(np.abs(offdiag) <= 1e-8 * scale[:, None, None], axis=(1, 2))
    # separable: minimise each coordinate on its interval
    d_lo, d_hi = lo - c, hi - c
    with np.errstate(divide="ignore", invalid="ignore"):
        d_int = np.clip(-g / diag, d_lo, d_hi)
    q = lambda d: g * d + 0.5 * diag * d * d
    cand = np.stack([np.broadcast_to(d_lo, (P, l)), np.broadcast_to(d_hi, (P, l)),
                     np.where(diag > 0, d_int, d_lo)], axis=0)
    vals = np.stack([q(cd) for cd in cand], axis=0)
    best = np.argmin(vals, axis=0)
    d_star = np.take_along_axis(cand, best[None], axis=0)[0]
    u_star = np.clip(c + d_star, lo, hi)
    return u_star, phi(u_star) if P else f0, ok


def _multistart(problem, t, x_row, p_row, domain: ControlDomain):
    lo, hi = domain.lower, domain.upper

    def obj(u):
        return float(h_eff(problem, t, x_row[None], u[None], p_row[None])[0])

    starts = list(domain.corners()[:16]) + [domain.center()]
    best_u, best_v = None, math.inf
    for u0 in starts:
        v0 = obj(u0)
        if v0 < best_v:
            best_u, best_v = np.array(u0, dtype=float), v0
        res = minimize(obj, u0, method="L-BFGS-B", bounds=list(zip(lo, hi)))
        u = np.clip(res.x, lo, hi)
        v = obj(u)
        if v < best_v:
            best_u, best_v = u, v
    return best_u, best_v


def minimize_batch(problem: ControlProblem, t, x, p_eff, return_values: bool = False):
    """Row-wise minimiser of ``<b, p_eff> + f`` over the control domain."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.broadcast_to(np.atleast_2d(np.asarray(p_eff, dtype=float)), x.shape)
    dom = problem.control_domain
    P = x.shape[0]
    if dom.kind == "finite_set":
        pts = np.stack(dom.points)
        vals = np.stack([h_eff(problem, t, x, np.broadcast_to(u, (P, u.size)), p) for u in pts], axis=1)
        idx = np.argmin(vals, axis=1)  # first index wins ties
        u = pts[idx]
        v = vals[np.arange(P), idx]
    else:
        u, v, ok = _quadratic_fit(problem, t, x, p, dom)
        for r in np.flatnonzero(~ok):
            u[r], v[r] = _multistart(problem, t, x[r], p[r], dom)
    return (u, v) if return_values else u


def minimize_extended_hamiltonian(problem: ControlProblem, t, x, costate) -> tuple[np.ndarray, float]:
    """Minimiser ``u*`` and minimum of ``<b(t,x,u), p_eff> + f(t,x,u)`` over U."""
    p = costate.p_eff if isinstance(costate, ExtendedCostate) else np.atleast_1d(costate)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u, v = minimize_batch(problem, t, x[None], p[None], return_values=True)
    return u[0], float(v[0])


def variational_residual(problem: ControlProblem, t, x, u, u_bar, costate) -> float:
    """``<b(u) - b(u_bar), p_eff> + f(u) - f(u_bar)``; non-negative at an optimum."""
    p = costate.p_eff if isinstance(costate, ExtendedCostate) else np.atleast_1d(costate)
    x = np.atleast_1d(np.asarray(x, dtype=float))[None]
    u = np.atleast_1d(np.asarray(u, dtype=float))[None]
    ub = np.atleast_1d(np.asarray(u_bar, dtype=float))[None]
    db = problem.b(t, x, u)[0] - problem.b(t, x, ub)[0]
    return float(db @ p + (problem.f(t, x, u)[0] - problem.f(t, x, ub)[0]))


def _residual_matrix(problem, t, x, u_grid, u_bar, p):
    """Residuals for states ``x (S, n)`` against every grid control: ``(S, K)``."""
    S, K = x.shape[0], u_grid.shape[0]
    xs = np.repeat(x, K, axis=0)
    us = np.tile(u_grid, (S, 1))
    ubs = np.repeat(u_bar, K, axis=0)
    ps = np.repeat(p, K, axis=0)
    db = problem.b(t, xs, us) - problem.b(t, xs, ubs)
    r = np.einsum("pn,pn->p", db, ps) + problem.f(t, xs, us) - problem.f(t, xs, ubs)
    return r.reshape(S, K), db.reshape(S, K, -1)


# ---------------------------------------------------------------------------
# spike variations


@dataclass(frozen=True)
class SpikePerturbation:
    tau: float
    epsilon: float
    spike_value: np.ndarray
    base: ControlPolicy
    horizon: float

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.spike_value, dtype=float))
        object.__setattr__(self, "spike_value", v)
        if not 0.0 <= self.tau < self.horizon:
            raise ConfigError(f"tau={self.tau} must lie in [0, T)")
        if not (self.epsilon > 0 and self.tau + self.epsilon <= self.horizon + TIME_EPS):
            raise ConfigError(f"epsilon={self.epsilon} must lie in (0, T - tau] with T={self.horizon}")

    @property
    def end(self) -> float:
        return self.tau + self.epsilon

    def active(self, t: float) -> bool:
        return self.tau <= t + TIME_EPS < self.end

    def policy(self) -> ControlPolicy:
        base, v = self.base, self.spike_value
        if base.is_open_loop:
            bps = sorted(set(base.breakpoints) | {0.0, self.tau} | ({self.end} if self.end < self.horizon - TIME_EPS else set()))
            vals = [v if self.active(b) else base.value_at(b) for b in bps]
            return ControlPolicy.piecewise_constant(bps, vals)

        def fn(t, x):
            if self.active(t):
                return np.broadcast_to(v, (np.atleast_2d(x).shape[0], v.size))
            return base(t, x)

        return ControlPolicy.feedback(fn, sorted(set(base.breakpoints) | {self.tau, self.end}))


def spike_perturb(base: ControlPolicy, tau: float, epsilon: float, v, *, horizon: float,
                  domain: Optional[ControlDomain] = None) -> ControlPolicy:
    """``v`` on ``[tau, tau + epsilon)``, ``base`` elsewhere."""
    if domain is not None and not domain.contains(v):
        raise ConfigError(f"spike value {v} is outside the control domain")
    return SpikePerturbation(tau, epsilon, v, base, horizon).policy()


@dataclass(frozen=True)
class SpikeCheck:
    tau: float
    epsilon: float
    spike_value: list
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    combined_se: float
    passed: bool
    lhs_nonnegative: bool

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        for k in ("tau", "epsilon", "lhs", "lhs_se", "rhs", "rhs_se", "combined_se"):
            out[k] = float(out[k])
        return out


def G_hessian(problem: ControlProblem, m) -> np.ndarray:
    m = np.atleast_1d(np.asarray(m, dtype=float))
    n = m.size
    H = np.empty((n, n))
    for i in range(n):
        h = 1e-5 * max(1.0, abs(m[i]))
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (problem.G_grad(m + e) - problem.G_grad(m - e)) / (2 * h)
    return 0.5 * (H + H.T)


def _cost_run(problem, policy, cfg, workers, keep_steps=None):
    out = run_paths(problem_dynamics(problem, policy), 0.0, problem.horizon, problem.initial_state,
                    cfg, workers=workers, keep_steps=keep_steps)
    y = out["running"] + problem.h(out["terminal"])
    return y, out["terminal"], out["states"]


def _plugin(problem, y, xt):
    m = xt.mean(axis=0)
    return float(y.mean()) + problem.G(m), y + xt @ problem.G_grad(m)


def spike_difference_check(problem: ControlProblem, base: ControlPolicy, spike: SpikePerturbation,
                           cfg: McConfig, costate: Optional[Callable] = None, *, workers: int = 1,
                           base_samples=None) -> SpikeCheck:
    """Compare the cost change of a spike with its first-order integral form.

    ``lhs`` is the common-random-number estimate of ``J(spike) - J(base)``;
    ``rhs`` integrates ``<db, theta_x> + sum_i G_i(E[g(t, X)]) <db, g^i_x> + df``
    over the spike window along the perturbed paths (trapezoid rule on the
    simulation grid).  Both standard errors use per-path influence functions.
    """
    times = time_grid(0.0, problem.horizon, cfg.n_steps)
    pol = spike.policy()
    check_policy_grid(pol, times)
    dt = problem.horizon / cfg.n_steps
    k0, k1 = round(spike.tau / dt), round(spike.end / dt)
    if costate is None:
        costate = CostateLattice.around_paths(problem, base, McConfig(4096, 50, derive_seed(cfg.seed, 1)),
                                              workers=workers)
    if base_samples is None:
        base_samples = _cost_run(problem, base, cfg, workers)[:2]
    y0, xt0 = base_samples
    y1, xt1, window = _cost_run(problem, pol, cfg, workers, keep_steps=np.arange(k0, k1 + 1))
    j0, inf0 = _plugin(problem, y0, xt0)
    j1, inf1 = _plugin(problem, y1, xt1)
    P = y0.shape[0]
    lhs = j1 - j0
    d_inf = inf1 - inf0
    lhs_se = float(np.std(d_inf, ddof=1) / math.sqrt(P)) if P > 1 else math.inf

    K = k1 - k0 + 1
    w = np.full(K, dt)
    w[0] = w[-1] = 0.5 * dt
    rhs = 0.0
    Z = np.zeros(P)
    field_se = 0.0
    v = spike.spike_value
    for j in range(K):
        t = float(times[k0 + j])
        X = window[:, j, :]
        ub = base(t, X)
        vv = np.broadcast_to(v, ub.shape)
        db = problem.b(t, X, vv) - problem.b(t, X, ub)
        df = problem.f(t, X, vv) - problem.f(t, X, ub)
        cs = _zeros_like_sample(costate(t, X))
        gbar = cs.g.mean(axis=0)
        Gg = problem.G_grad(gbar)
        a = np.einsum("pn,pn->p", db, cs.theta_x) + df
        bvec = np.einsum("pji,pj->pi", cs.g_x, db)
        integrand = a + bvec @ Gg
        c = bvec.mean(axis=0)
        Hc = G_hessian(problem, gbar) @ c
        Z += w[j] * (integrand + (cs.g - gbar) @ Hc)
        rhs += w[j] * float(integrand.mean())
        adb = np.abs(db)
        field_se += w[j] * float(np.mean(np.einsum("pn,pn->p", adb, cs.theta_x_se)
                                         + np.einsum("pji,pj,i->p", cs.g_x_se, adb, np.abs(Gg))
                                         + cs.g_se @ np.abs(Hc)))
    rhs_se = (float(np.std(Z, ddof=1) / math.sqrt(P)) if P > 1 else math.inf) + field_se
    comb = math.hypot(lhs_se, rhs_se)
    passed = abs(lhs - rhs) <= 3 * comb + roundoff_floor(lhs, rhs)
    return SpikeCheck(spike.tau, spike.epsilon, v.tolist(), lhs, lhs_se, rhs, rhs_se, comb, bool(passed),
                      bool(lhs >= -3 * lhs_se - roundoff_floor(lhs)))


# ---------------------------------------------------------------------------
# objective value and adjoint


def objective_via_bspde(theta_at_origin: float, g_at_origin, G) -> float:
    """``theta(0, x0) + G(g(0, x0))``; ``G`` is a callable or a problem."""
    G = G.G if isinstance(G, ControlProblem) else G
    return float(theta_at_origin) + float(G(np.atleast_1d(np.asarray(g_at_origin, dtype=float))))


def assemble_adjoint(theta_x, g_x, G_grad, times=None, trajectory_times=None) -> np.ndarray:
    """Pointwise ``theta_x(t) + sum_i G_i g^i_x(t)`` along one trajectory.

    ``theta_x`` has shape ``(K, n)`` and ``g_x`` ``(K, n, n)``.
    """
    theta_x = np.asarray(theta_x, dtype=float)
    theta_x = theta_x.reshape(len(theta_x), -1)
    K, n = theta_x.shape
    g_x = np.asarray(g_x, dtype=float)
    if g_x.shape[0] != K:
        raise GridMismatchError("theta_x and g_x are sampled on different grids")
    g_x = g_x.reshape(K, n, n)
    if times is not None and trajectory_times is not None:
        a, b = np.asarray(times, dtype=float), np.asarray(trajectory_times, dtype=float)
        if a.shape != b.shape or np.max(np.abs(a - b)) > TIME_EPS:
            raise GridMismatchError("costate samples and trajectory use different time grids")
    if times is not None and len(times) != K:
        raise GridMismatchError("time grid length does not match the costate samples")
    return theta_x + np.einsum("kji,i->kj", g_x, np.atleast_1d(np.asarray(G_grad, dtype=float)))


def adjoint_along_path(problem: ControlProblem, policy: ControlPolicy, times, states, cfg: McConfig,
                       terminal_mean, *, h_grad: Optional[Callable] = None, workers: int = 1):
    """Adjoint ``p(t_k)`` along one trajectory with fields from ``fk_gradient``.

    Returns ``(p, p_se)``, each ``(K, n)``.  At ``t = T`` the gradients are
    ``h_x`` (analytic if ``h_grad`` is given) and the identity.
    """
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float).reshape(len(times), -1)
    n = problem.state_dim
    th_spec = theta_spec(problem, policy)
    g_specs = [g_tilde_spec(problem, policy, i) for i in range(n)]
    T = problem.horizon
    theta_x = np.empty((len(times), n))
    theta_se = np.zeros_like(theta_x)
    g_x = np.empty((len(times), n, n))
    g_se = np.zeros_like(g_x)
    for k, (t, x) in enumerate(zip(times, states)):
        if t >= T - TIME_EPS and h_grad is not None:
            theta_x[k] = np.asarray(h_grad(x[None]), dtype=float).reshape(n)
            g_x[k] = np.eye(n)
            continue
        steps = max(1, math.ceil(cfg.n_steps * (T - t) / T - 1e-9))
        ck = cfg.replace(n_steps=steps, seed=derive_seed(cfg.seed, k))
        est = fk_gradient(th_spec, float(t), x, ck, workers=workers)
        theta_x[k], theta_se[k] = est.gradient, est.gradient_std_error
        for i, spec in enumerate(g_specs):
            est = fk_gradient(spec, float(t), x, ck, workers=workers)
            g_x[k, :, i] = np.eye(n)[:, i] + est.gradient
            g_se[k, :, i] = est.gradient_std_error
    Gg = problem.G_grad(terminal_mean)
    p = assemble_adjoint(theta_x, g_x, Gg)
    p_se = theta_se + np.einsum("kji,i->kj", g_se, np.abs(Gg))
    return p, p_se


# ---------------------------------------------------------------------------
# sufficiency


@dataclass
class CheckSection:
    checked: int = 0
    violations: list = field(default_factory=list)
    n_violations: int = 0

    @property
    def passed(self) -> bool:
        return self.n_violations == 0

    def add(self, item: dict, keep: int = 50):
        self.n_violations += 1
        if len(self.violations) < keep:
            self.violations.append(item)

    def to_dict(self) -> dict:
        return {"checked": self.checked, "n_violations": self.n_violations,
                "passed": self.passed, "violations": self.violations}


@dataclass
class SufficiencyReport:
    first_order: CheckSection
    hamiltonian_convexity: CheckSection
    terminal_convexity: CheckSection
    meanfield_convexity: CheckSection
    differentiable_in_u: bool
    tolerance: float

    @property
    def convexity_passed(self) -> bool:
        return (self.hamiltonian_convexity.passed and self.terminal_convexity.passed
                and self.meanfield_convexity.passed)

    @property
    def sufficient(self) -> bool:
        return self.first_order.passed and self.convexity_passed and self.differentiable_in_u

    def to_dict(self) -> dict:
        return {
            "first_order": self.first_order.to_dict(),
            "hamiltonian_convexity": self.hamiltonian_convexity.to_dict(),
            "terminal_convexity": self.terminal_convexity.to_dict(),
            "meanfield_convexity": self.meanfield_convexity.to_dict(),
            "differentiable_in_u": self.differentiable_in_u,
            "tolerance": self.tolerance,
            "sufficient": self.sufficient,
        }


def _u_gradient(problem, t, x, u, p, step):
    l = u.shape[1]
    g = np.empty_like(u)
    for j in range(l):
        e = np.zeros(l)
        e[j] = step
        g[:, j] = (h_eff(problem, t, x, u + e, p) - h_eff(problem, t, x, u - e, p)) / (2 * step)
    return g


def sample_states(problem: ControlProblem, policy: ControlPolicy, times, n_samples: int = 8,
                  seed: int = 0, substeps: int = 10) -> np.ndarray:
    """States of ``n_samples`` trajectories at ``times`` (uniform grid from 0): ``(K, S, n)``."""
    times = np.asarray(times, dtype=float)
    cfg = McConfig(n_samples, substeps * (len(times) - 1), seed)
    out = run_paths(problem_dynamics(problem, policy, with_cost=False), 0.0, float(times[-1]),
                    problem.initial_state, cfg, keep_states=True)
    return out["states"][:, ::substeps, :].transpose(1, 0, 2)


def sufficient_check(problem: ControlProblem, policy: ControlPolicy, costate: Callable, terminal_mean, *,
                     times=None, states=None, u_points: int = 41, n_pairs: int = 200,
                     tol: float = 1e-8, seed: int = 0) -> SufficiencyReport:
    """First-order condition at the candidate plus midpoint convexity sampling."""
    dom = problem.control_domain
    if not dom.is_convex:
        raise ConfigError("sufficiency check requires convex domain")
    times = np.linspace(0.0, problem.horizon, 21) if times is None else np.asarray(times, dtype=float)
    if states is None:
        states = sample_states(problem, policy, times, seed=seed)
    rng = np.random.default_rng(seed)
    Gg = problem.G_grad(terminal_mean)
    u_grid = dom.grid(u_points)
    lo, hi = dom.lower, dom.upper
    first, hconv, tconv, gconv = CheckSection(), CheckSection(), CheckSection(), CheckSection()
    differentiable = True
    for t, X in zip(times, states):
        t = float(t)
        p = _zeros_like_sample(costate(t, X)).p_eff(Gg)
        ub = policy(t, X)
        step = 1e-6 * max(1.0, float(np.max(np.abs(hi - lo))))
        grad = _u_gradient(problem, t, X, ub, p, step)
        grad10 = _u_gradient(problem, t, X, ub, p, 10 * step)
        if np.any(np.abs(grad - grad10) > 1e-4 * (1 + np.abs(grad))):
            differentiable = False
        ip = (u_grid[None, :, :] - ub[:, None, :]) @ grad[:, :, None]
        ip = ip[..., 0]
        first.checked += ip.size
        for s, k in zip(*np.nonzero(ip < -tol)):
            first.add({"t": t, "x": X[s].tolist(), "u": u_grid[k].tolist(), "value": float(ip[s, k])})
        # convexity of (x, u) -> <b, p> + f with p frozen at this time
        x1 = X[rng.integers(len(X), size=n_pairs)] + rng.normal(size=(n_pairs, X.shape[1]))
        x2 = X[rng.integers(len(X), size=n_pairs)] + rng.normal(size=(n_pairs, X.shape[1]))
        u1 = rng.uniform(lo, hi, size=(n_pairs, lo.size))
        u2 = rng.uniform(lo, hi, size=(n_pairs, lo.size))
        pp = np.broadcast_to(p.mean(axis=0), (n_pairs, p.shape[1]))
        hm = h_eff(problem, t, 0.5 * (x1 + x2), 0.5 * (u1 + u2), pp)
        ha = 0.5 * (h_eff(problem, t, x1, u1, pp) + h_eff(problem, t, x2, u2, pp))
        hconv.checked += n_pairs
        for i in np.flatnonzero(hm > ha + tol * (1 + np.abs(ha))):
            hconv.add({"t": t, "gap": float(hm[i] - ha[i])})
    flat = states.reshape(-1, states.shape[-1])
    x1 = flat[rng.integers(len(flat), size=n_pairs)] + 2 * rng.normal(size=(n_pairs, flat.shape[1]))
    x2 = flat[rng.integers(len(flat), size=n_pairs)] + 2 * rng.normal(size=(n_pairs, flat.shape[1]))
    hm = problem.h(0.5 * (x1 + x2))
    ha = 0.5 * (problem.h(x1) + problem.h(x2))
    tconv.checked = n_pairs
    for i in np.flatnonzero(hm > ha + tol * (1 + np.abs(ha))):
        tconv.add({"x1": x1[i].tolist(), "x2": x2[i].tolist(), "gap": float(hm[i] - ha[i])})
    m = np.atleast_1d(np.asarray(terminal_mean, dtype=float))
    for _ in range(n_pairs):
        m1 = m + rng.uniform(-2, 2, size=m.size)
        m2 = m + rng.uniform(-2, 2, size=m.size)
        gm, ga = problem.G(0.5 * (m1 + m2)), 0.5 * (problem.G(m1) + problem.G(m2))
        gconv.checked += 1
        if gm > ga + tol * (1 + abs(ga)):
            gconv.add({"m1": m1.tolist(), "m2": m2.tolist(), "gap": gm - ga})
    return SufficiencyReport(first, hconv, tconv, gconv, differentiable, tol)


# ---------------------------------------------------------------------------
# variational-inequality grid report


@dataclass
class SmpReport:
    times: np.ndarray
    u_grid: np.ndarray
    residuals: np.ndarray
    min_gaps: np.ndarray
    tolerance: float
    residual_tolerance: np.ndarray
    terminal_mean: np.ndarray
    objective_via_formula: Optional[float] = None
    objective_via_mc: Optional[CostEstimate] = None
    spike_checks: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)

    @property
    def verdict(self) -> bool:
        ok_res = np.all(self.residuals >= -self.residual_tolerance)
        # the gap equals minus the smallest residual over U, so it shares the widened bound
        ok_gap = np.all(self.min_gaps <= self.residual_tolerance.max(axis=1))
        return bool(ok_res and ok_gap)

    @property
    def min_residual(self) -> float:
        return float(self.residuals.min())

    def failures(self) -> list[str]:
        out = []
        bad = np.argwhere(self.residuals < -self.residual_tolerance)
        for i in sorted({int(i) for i, _ in bad}):
            out.append(f"negative variational residual at t={self.times[i]:.6g}: "
                       f"min {self.residuals[i].min():.6g}")
        for i in np.flatnonzero(self.min_gaps > self.tolerance):
            out.append(f"minimum-condition gap {self.min_gaps[i]:.6g} at t={self.times[i]:.6g}")
        for s in self.spike_checks:
            if not s.passed:
                out.append(f"spike identity failed at tau={s.tau}, eps={s.epsilon}, v={s.spike_value}")
        return out

    def to_dict(self) -> dict:
        return {
            "verdict": "pass" if self.verdict else "fail",
            "tolerance": self.tolerance,
            "max_residual_tolerance": float(np.max(self.residual_tolerance)),
            "min_residual": self.min_residual,
            "times": self.times.tolist(),
            "u_grid": self.u_grid.tolist(),
            "residuals": self.residuals.tolist(),
            "min_gaps": self.min_gaps.tolist(),
            "terminal_mean": np.atleast_1d(self.terminal_mean).tolist(),
            "objective_via_formula": self.objective_via_formula,
            "objective_via_mc": None if self.objective_via_mc is None else self.objective_via_mc.to_dict(),
            "spike_checks": [s.to_dict() for s in self.spike_checks],
            "seeds": dict(self.seeds),
            "failures": self.failures(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def to_table(self) -> str:
        lines = [f"{'t':>8} {'min residual':>14} {'argmin u':>10} {'min gap':>12}"]
        for i, t in enumerate(self.times):
            k = int(np.argmin(self.residuals[i]))
            lines.append(f"{t:8.4f} {self.residuals[i, k]:14.6e} {self.u_grid[k][0]:10.4f} {self.min_gaps[i]:12.4e}")
        lines.append(f"verdict: {'pass' if self.verdict else 'fail'} (tolerance {self.tolerance:g})")
        if self.objective_via_formula is not None:
            lines.append(f"objective via formula: {self.objective_via_formula:.6f}")
        if self.objective_via_mc is not None:
            mc = self.objective_via_mc
            lines.append(f"objective via MC:      {mc.mean:.6f} +/- {mc.std_error:.2e}")
        for s in self.spike_checks:
            lines.append(f"spike tau={s.tau:g} eps={s.epsilon:g} v={s.spike_value}: lhs={s.lhs:.5f} "
                         f"rhs={s.rhs:.5f} se={s.combined_se:.1e} {'ok' if s.passed else 'FAIL'}")
        return "\n".join(lines)


def smp_report(problem: ControlProblem, policy: ControlPolicy, costate: Callable, terminal_mean, *,
               terminal_mean_se=None, times=None, states=None, u_points: int = 41,
               tolerance: float = 1e-6, seed: int = 0) -> SmpReport:
    """Variational residuals on a (t, u) grid and minimum-condition gaps per t.

    Residuals are minimised over the sampled states at each time.  When the
    terminal mean is itself an estimate, ``terminal_mean_se`` widens the
    residual tolerance by three standard errors propagated through G's Hessian.
    """
    times = np.linspace(0.0, problem.horizon, 21) if times is None else np.asarray(times, dtype=float)
    if states is None:
        states = sample_states(problem, policy, times, seed=seed)
    m = np.atleast_1d(np.asarray(terminal_mean, dtype=float))
    Gg = problem.G_grad(m)
    HG = G_hessian(problem, m)
    se_m = np.zeros_like(m) if terminal_mean_se is None else np.atleast_1d(np.asarray(terminal_mean_se, dtype=float))
    u_grid = problem.control_domain.grid(u_points)
    res = np.empty((len(times), len(u_grid)))
    rtol = np.full_like(res, tolerance)
    gaps = np.empty(len(times))
    for i, (t, X) in enumerate(zip(times, states)):
        t = float(t)
        cs = _zeros_like_sample(costate(t, X))
        p = cs.p_eff(Gg)
        ub = policy(t, X)
        r, db = _residual_matrix(problem, t, X, u_grid, ub, p)
        s = np.argmin(r, axis=0)
        res[i] = r[s, np.arange(len(u_grid))]
        if np.any(se_m > 0):
            # d residual / d m = (g_x^T db)^T H_G
            gdb = np.einsum("sji,skj->ski", cs.g_x, db)
            sens = np.abs(gdb @ HG) @ se_m
            rtol[i] += 3 * sens[s, np.arange(len(u_grid))]
        _, vmin = minimize_batch(problem, t, X, p, return_values=True)
        gaps[i] = float(np.max(h_eff(problem, t, X, ub, p) - vmin))
    return SmpReport(times, u_grid, res, gaps, tolerance, rtol, m, seeds={"states": seed})

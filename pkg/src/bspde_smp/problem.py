"""Controlled system, cost functional and control domain.

All coefficient callables are evaluated on batches: ``x`` has shape
``(P, n)`` and ``u`` has shape ``(P, l)``.  Results are broadcast to the
expected shapes (``(P, n)`` for the drift, ``(P, n, d)`` for the diffusion,
``(P,)`` for costs), so a coefficient may return a scalar when it is constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, GridMismatchError

# half-open interval tests snap times within this distance of a breakpoint
TIME_EPS = 1e-9


def _first(a):
    a = np.asarray(a, dtype=float)
    return a[..., 0] if a.ndim else a


@dataclass(frozen=True)
class ControlDomain:
    """Either a finite list of control vectors or a box ``[lower, upper]``."""

    kind: str
    points: tuple = ()
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    @classmethod
    def finite_set(cls, points: Sequence) -> "ControlDomain":
        pts = tuple(np.atleast_1d(np.asarray(p, dtype=float)) for p in points)
        if not pts:
            raise ConfigError("finite control set must be non-empty")
        if len({p.shape for p in pts}) != 1:
            raise ConfigError("control vectors must share one dimension")
        return cls(kind="finite_set", points=pts)

    @classmethod
    def box(cls, lower, upper) -> "ControlDomain":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape:
            raise ConfigError("box bounds must have equal length")
        if np.any(lo > hi):
            raise ConfigError("box requires lower <= upper componentwise")
        return cls(kind="box", lower=lo, upper=hi)

    @property
    def control_dim(self) -> int:
        return self.points[0].size if self.kind == "finite_set" else self.lower.size

    @property
    def is_convex(self) -> bool:
        return self.kind == "box"

    def contains(self, u, atol: float = 1e-12) -> bool:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.kind == "box":
            return bool(np.all(u >= self.lower - atol) and np.all(u <= self.upper + atol))
        return any(np.allclose(u, p, atol=atol, rtol=0.0) for p in self.points)

    def project(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, self.lower, self.upper)
        pts = np.stack(self.points)
        flat = np.atleast_2d(u)
        idx = np.argmin(((flat[:, None, :] - pts[None]) ** 2).sum(-1), axis=1)
        return pts[idx].reshape(u.shape if u.ndim else pts[0].shape)

    def corners(self) -> np.ndarray:
        if self.kind != "box":
            return np.stack(self.points)
        l = self.control_dim
        grid = np.array(np.meshgrid(*[(0, 1)] * l, indexing="ij")).reshape(l, -1).T
        return np.where(grid == 0, self.lower, self.upper)

    def center(self) -> np.ndarray:
        if self.kind == "box":
            return 0.5 * (self.lower + self.upper)
        return np.mean(np.stack(self.points), axis=0)

    def grid(self, n_per_dim: int) -> np.ndarray:
        """Tensor grid of controls (box) or the full finite set."""
        if self.kind != "box":
            return np.stack(self.points)
        axes = [np.linspace(a, b, n_per_dim) for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class ControlPolicy:
    """Constant, piecewise-constant or feedback control law.

    Every variant is called as ``policy(t, x)`` with ``x`` of shape ``(P, n)``
    and returns controls of shape ``(P, l)``.  ``breakpoints`` lists the times
    where the policy may jump; they must lie on any simulation grid used with it.
    """

    kind: str
    value: np.ndarray | None = None
    breakpoints: tuple = ()
    values: tuple = ()
    fn: Callable | None = None

    @classmethod
    def constant(cls, u) -> "ControlPolicy":
        return cls(kind="constant", value=np.atleast_1d(np.asarray(u, dtype=float)))

    @classmethod
    def piecewise_constant(cls, breakpoints, values) -> "ControlPolicy":
        bps = tuple(float(b) for b in breakpoints)
        vals = tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in values)
        if len(bps) != len(vals) or not bps:
            raise ConfigError("piecewise policy needs one value per breakpoint")
        if any(b1 <= b0 for b0, b1 in zip(bps, bps[1:])):
            raise ConfigError("breakpoints must be strictly increasing")
        return cls(kind="piecewise_constant", breakpoints=bps, values=vals)

    @classmethod
    def feedback(cls, fn: Callable, breakpoints=()) -> "ControlPolicy":
        return cls(kind="feedback", fn=fn, breakpoints=tuple(float(b) for b in breakpoints))

    def value_at(self, t: float) -> np.ndarray:
        """Control value of an open-loop policy at time ``t`` (half-open pieces)."""
        if self.kind == "constant":
            return self.value
        if self.kind == "piecewise_constant":
            k = int(np.searchsorted(self.breakpoints, t + TIME_EPS, side="right")) - 1
            return self.values[max(k, 0)]
        raise TypeError("feedback policies have no open-loop value")

    def __call__(self, t: float, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "feedback":
            u = np.asarray(self.fn(t, x), dtype=float)
            if u.ndim == 0:
                return np.full((x.shape[0], 1), float(u))
            if u.ndim == 1:
                return u.reshape(x.shape[0], -1) if u.size == x.shape[0] else np.broadcast_to(u, (x.shape[0], u.size))
            return u
        v = self.value_at(t)
        return np.broadcast_to(v, (x.shape[0], v.size))

    @property
    def is_open_loop(self) -> bool:
        return self.kind != "feedback"


@dataclass(frozen=True)
class ControlProblem:
    """Problem data ``(b, sigma, f, h, G, U, T, x0)``."""

    state_dim: int
    noise_dim: int
    horizon: float
    initial_state: np.ndarray
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal_cost: Callable
    meanfield_cost: Callable
    meanfield_grad: Callable
    control_domain: ControlDomain
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_dim < 1 or self.noise_dim < 1:
            raise ConfigError("state_dim and noise_dim must be positive")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        x0 = np.atleast_1d(np.asarray(self.initial_state, dtype=float))
        if x0.shape != (self.state_dim,):
            raise ConfigError("initial_state length must equal state_dim")
        object.__setattr__(self, "initial_state", x0)

    # batched evaluation with shape normalisation
    def b(self, t, x, u) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.drift(t, x, u), dtype=float), x.shape)

    def sigma(self, t, x) -> np.ndarray:
        out = np.asarray(self.diffusion(t, x), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (self.state_dim, self.noise_dim))

    def f(self, t, x, u) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.running_cost(t, x, u), dtype=float), x.shape[:-1])

    def h(self, x) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.terminal_cost(x), dtype=float), x.shape[:-1])

    def G(self, m) -> float:
        return float(self.meanfield_cost(np.atleast_1d(np.asarray(m, dtype=float))))

    def G_grad(self, m) -> np.ndarray:
        g = np.asarray(self.meanfield_grad(np.atleast_1d(np.asarray(m, dtype=float))), dtype=float)
        return np.broadcast_to(g, (self.state_dim,)).copy()

    def replace(self, **changes) -> "ControlProblem":
        from dataclasses import replace

        return replace(self, **changes)


def build_example_e(horizon: float = 1.0, x0: float = 0.0, u_lower: float = -2.0,
                    u_upper: float = 2.0) -> ControlProblem:
    """Scalar example: dX = u dt + dW, cost ½∫(u+1)² dt − ½exp(−E[X(T)]²)."""
    return ControlProblem(
        state_dim=1,
        noise_dim=1,
        horizon=horizon,
        initial_state=np.array([x0]),
        drift=lambda t, x, u: u,
        diffusion=lambda t, x: 1.0,
        running_cost=lambda t, x, u: 0.5 * (_first(u) + 1.0) ** 2,
        terminal_cost=lambda x: 0.0,
        meanfield_cost=lambda m: -0.5 * np.exp(-np.sum(np.square(m))),
        meanfield_grad=lambda m: np.asarray(m, dtype=float) * np.exp(-np.sum(np.square(m))),
        control_domain=ControlDomain.box([u_lower], [u_upper]),
        name="example_e",
        params={"horizon": horizon, "x0": x0, "u_lower": u_lower, "u_upper": u_upper},
    )


BUILTIN_PROBLEMS = {"example_e": build_example_e}


def problem_from_config(cfg: dict) -> ControlProblem:
    """Build a problem from parsed ``key = value`` entries.

    Recognised keys: ``problem`` (builtin name), ``horizon``, ``x0``,
    ``u_lower``, ``u_upper``.  Unknown builtin names raise ``ConfigError``.
    """
    name = cfg.get("problem", "example_e")
    if name not in BUILTIN_PROBLEMS:
        raise ConfigError(f"unknown builtin problem {name!r}")
    kwargs = {}
    for key in ("horizon", "x0", "u_lower", "u_upper"):
        if key in cfg:
            try:
                kwargs[key] = float(cfg[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key} must be numeric, got {cfg[key]!r}") from exc
    if "horizon" in kwargs and not kwargs["horizon"] > 0:
        raise ConfigError(f"horizon must be positive, got {kwargs['horizon']}")
    return BUILTIN_PROBLEMS[name](**kwargs)


@dataclass(frozen=True)
class CostEstimate:
    """Monte Carlo estimate of the cost functional.

    ``mean`` is the plug-in estimate E[∫f + h] + G(sample mean of X(T)).
    ``std_error`` is the delta-method standard error of that plug-in value;
    ``running_std_error`` covers the ∫f + h part alone.
    """

    mean: float
    std_error: float
    running_mean: float
    running_std_error: float
    meanfield_plugin: float
    terminal_mean: np.ndarray
    n_paths: int

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std_error": self.std_error,
            "running_mean": self.running_mean,
            "running_std_error": self.running_std_error,
            "meanfield_plugin": self.meanfield_plugin,
            "terminal_mean": self.terminal_mean.tolist(),
            "n_paths": self.n_paths,
        }


def cost_from_samples(problem: ControlProblem, running: np.ndarray,
                      terminal_states: np.ndarray) -> CostEstimate:
    """Combine per-path ``∫f dt + h(X(T))`` samples and terminal states."""
    n_paths = running.shape[0]
    m = terminal_states.mean(axis=0)
    gval = problem.G(m)
    influence = running + terminal_states @ problem.G_grad(m)
    if n_paths > 1:
        se = float(np.std(influence, ddof=1) / math.sqrt(n_paths))
        run_se = float(np.std(running, ddof=1) / math.sqrt(n_paths))
    else:
        se = run_se = math.inf
    run_mean = float(running.mean())
    return CostEstimate(
        mean=run_mean + gval,
        std_error=se,
        running_mean=run_mean,
        running_std_error=run_se,
        meanfield_plugin=gval,
        terminal_mean=m,
        n_paths=n_paths,
    )


def check_policy_grid(policy: ControlPolicy, times: np.ndarray) -> None:
    """Raise ``GridMismatchError`` if a breakpoint inside the grid span is off-grid."""
    t0, t1 = float(times[0]), float(times[-1])
    dt = (t1 - t0) / (len(times) - 1)
    for bp in policy.breakpoints:
        if t0 + TIME_EPS < bp < t1 - TIME_EPS:
            k = (bp - t0) / dt
            if abs(k - round(k)) > 1e-6:
                raise GridMismatchError(
                    f"policy breakpoint {bp:.6g} is not on the path grid (dt={dt:.6g})"
                )


def evaluate_cost(problem: ControlProblem, policy: ControlPolicy, paths) -> CostEstimate:
    """Cost of ``policy`` from a simulated ``PathBatch`` (left-endpoint rule for ∫f)."""
    times = paths.times
    check_policy_grid(policy, times)
    states = paths.states
    running = np.zeros(states.shape[0])
    for k in range(len(times) - 1):
        t = float(times[k])
        x = states[:, k, :]
        running += problem.f(t, x, policy(t, x)) * (times[k + 1] - times[k])
    running = running + problem.h(states[:, -1, :])
    return cost_from_samples(problem, running, states[:, -1, :])

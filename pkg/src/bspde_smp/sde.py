"""Seeded Brownian increments and batched Euler-Maruyama simulation.

Noise is drawn from a keyed Philox stream per (seed, block of ``BLOCK``
paths, noise component).  Within a stream the draws are laid out step-major,
so the increment for (path, step, component) does not depend on how many
paths or steps were requested, nor on how the paths are split over workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, SimulationError

BLOCK = 4096
# paths per work unit handed to a worker; multiple of BLOCK
CHUNK = 8 * BLOCK
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class McConfig:
    n_paths: int
    n_steps: int
    seed: int = 0

    def __post_init__(self):
        if int(self.n_paths) < 1:
            raise ConfigError(f"n_paths must be positive, got {self.n_paths}")
        if int(self.n_steps) < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0 <= int(self.seed) <= _MASK64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def replace(self, **kw) -> "McConfig":
        return McConfig(**{**self.__dict__, **kw})


def derive_seed(seed: int, *indices: int) -> int:
    """Deterministic 64-bit child seed for ``(seed, *indices)``."""
    ss = np.random.SeedSequence([int(seed) & _MASK64, *[int(i) for i in indices]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _block_normals(seed: int, block: int, n_steps: int, d: int) -> np.ndarray:
    out = np.empty((BLOCK, n_steps, d))
    for c in range(d):
        key = (int(seed) & _MASK64) | (block << 64) | (c << 112)
        gen = np.random.Generator(np.random.Philox(key=key))
        out[:, :, c] = gen.standard_normal((n_steps, BLOCK)).T
    return out


def standard_normals(seed: int, start: int, stop: int, n_steps: int, d: int) -> np.ndarray:
    """N(0,1) draws for paths ``[start, stop)``, shape ``(stop-start, n_steps, d)``."""
    first, last = start // BLOCK, (stop - 1) // BLOCK
    parts = [_block_normals(seed, b, n_steps, d) for b in range(first, last + 1)]
    z = np.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
    off = start - first * BLOCK
    return z[off:off + (stop - start)]


def brownian_increments(cfg: McConfig, d: int, dt: float, start: int = 0,
                        stop: Optional[int] = None) -> np.ndarray:
    """i.i.d. N(0, dt) increments, shape ``(n_paths, n_steps, d)``."""
    if not dt > 0:
        raise ConfigError("dt must be positive")
    stop = cfg.n_paths if stop is None else stop
    return math.sqrt(dt) * standard_normals(cfg.seed, start, stop, cfg.n_steps, d)


@dataclass(frozen=True)
class PathBatch:
    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    seed: int
    t_start: float
    t_end: float
    running: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]

    def to_csv(self, path) -> None:
        """One row per (path, step); debugging format only."""
        n, d = self.states.shape[2], self.increments.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "t"] + [f"x{i}" for i in range(n)] + [f"dW{j}" for j in range(d)])
            for p in range(self.n_paths):
                for k, t in enumerate(self.times):
                    dw = self.increments[p, k] if k < len(self.times) - 1 else [""] * d
                    w.writerow([p, k, repr(float(t))] + [repr(float(v)) for v in self.states[p, k]] + list(dw))


@dataclass(frozen=True)
class Dynamics:
    """Frozen coefficients for the engine.

    ``drift(t, x, u)``, ``diffusion(t, x)``, ``running(t, x, u)`` are batched;
    ``control(t, x)`` is evaluated once per step and passed as ``u`` (``None``
    when there is no control).
    """

    drift: Callable
    diffusion: Callable
    state_dim: int
    noise_dim: int
    running: Optional[Callable] = None
    control: Optional[Callable] = None


def time_grid(t_start: float, t_end: float, n_steps: int) -> np.ndarray:
    return np.linspace(t_start, t_end, n_steps + 1)


def integrate(dyn: Dynamics, times: np.ndarray, x0: np.ndarray, dW: np.ndarray,
              keep_states: bool = False, path_offset: int = 0, keep_steps=None):
    """Euler-Maruyama over ``times`` from ``x0`` (shape ``(P, n)``) with increments ``dW``.

    ``keep_steps`` (sorted grid indices) retains only those time levels.
    Returns ``(terminal, running_integral, states_or_None)``.
    """
    n_paths = x0.shape[0]
    x = np.array(x0, dtype=float)
    run = np.zeros(n_paths) if dyn.running is not None else None
    if keep_states:
        keep_steps = np.arange(len(times))
    slot = {}
    if keep_steps is not None:
        slot = {int(k): j for j, k in enumerate(keep_steps)}
    states = np.empty((n_paths, len(slot), dyn.state_dim)) if slot else None
    if 0 in slot:
        states[:, slot[0]] = x
    for k in range(len(times) - 1):
        t = float(times[k])
        dt = float(times[k + 1] - times[k])
        u = dyn.control(t, x) if dyn.control is not None else None
        b = np.broadcast_to(np.asarray(dyn.drift(t, x, u), dtype=float), x.shape)
        sig = np.asarray(dyn.diffusion(t, x), dtype=float)
        if run is not None:
            run += np.broadcast_to(np.asarray(dyn.running(t, x, u), dtype=float), (n_paths,)) * dt
        if sig.ndim < 3:
            noise = np.broadcast_to(sig, (dyn.state_dim, dyn.noise_dim)) @ dW[:, k, :].T
            x = x + b * dt + noise.T
        else:
            x = x + b * dt + np.einsum("pnd,pd->pn", sig, dW[:, k, :])
        if not np.isfinite(x).all():
            bad = int(np.argmax(~np.isfinite(x).all(axis=1)))
            raise SimulationError(path_offset + bad, k + 1, float(times[k + 1]))
        if k + 1 in slot:
            states[:, slot[k + 1]] = x
    return x, run, states


def run_paths(dyn: Dynamics, t_start: float, t_end: float, init, cfg: McConfig, *,
              keep_states: bool = False, workers: int = 1, starts=None, keep_steps=None):
    """Simulate ``cfg.n_paths`` paths, chunked by ``CHUNK`` and optionally threaded.

    ``starts`` (shape ``(K, n)``) runs every start point against the same
    increments (common random numbers); outputs then gain a leading ``K`` axis.
    Returns ``dict(terminal, running, states, increments, times)``.
    """
    if not t_end > t_start:
        raise ConfigError("t_end must exceed t_start")
    times = time_grid(t_start, t_end, cfg.n_steps)
    dt = (t_end - t_start) / cfg.n_steps
    pts = np.atleast_2d(np.asarray(init if starts is None else starts, dtype=float))
    if pts.shape[1] != dyn.state_dim:
        raise ConfigError("initial state has the wrong length")
    bounds = [(a, min(a + CHUNK, cfg.n_paths)) for a in range(0, cfg.n_paths, CHUNK)]

    def work(bound):
        a, b = bound
        dW = brownian_increments(cfg, dyn.noise_dim, dt, a, b)
        k, p = pts.shape[0], b - a
        x0 = np.repeat(pts, p, axis=0)
        dWk = np.broadcast_to(dW, (k,) + dW.shape).reshape((k * p,) + dW.shape[1:]) if k > 1 else dW
        term, run, st = integrate(dyn, times, x0, dWk, keep_states, path_offset=a, keep_steps=keep_steps)
        return dW if keep_states else None, term.reshape(k, p, -1), None if run is None else run.reshape(k, p), \
            None if st is None else st.reshape((k, p) + st.shape[1:])

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, bounds))
    else:
        results = [work(b) for b in bounds]
    terminal = np.concatenate([r[1] for r in results], axis=1)
    running = None if results[0][2] is None else np.concatenate([r[2] for r in results], axis=1)
    states = np.concatenate([r[3] for r in results], axis=1) if results[0][3] is not None else None
    incr = np.concatenate([r[0] for r in results], axis=0) if keep_states else None
    if starts is None:
        terminal = terminal[0]
        running = None if running is None else running[0]
        states = None if states is None else states[0]
    return {"terminal": terminal, "running": running, "states": states,
            "increments": incr, "times": times}


def problem_dynamics(problem, policy, with_cost: bool = True) -> Dynamics:
    return Dynamics(
        drift=problem.b,
        diffusion=problem.sigma,
        state_dim=problem.state_dim,
        noise_dim=problem.noise_dim,
        running=problem.f if with_cost else None,
        control=policy,
    )


def simulate(problem, policy, t_start: float, init, t_end: float, cfg: McConfig,
             workers: int = 1) -> PathBatch:
    """Euler-Maruyama paths of the controlled state under ``policy``."""
    if not (0.0 <= t_start < t_end <= problem.horizon + 1e-12):
        raise ConfigError("require 0 <= t_start < t_end <= T")
    init = np.atleast_1d(np.asarray(init, dtype=float))
    if init.shape != (problem.state_dim,):
        raise ConfigError("init must have length n")
    out = run_paths(problem_dynamics(problem, policy), t_start, t_end, init, cfg,
                    keep_states=True, workers=workers)
    return PathBatch(times=out["times"], states=out["states"], increments=out["increments"],
                     seed=cfg.seed, t_start=t_start, t_end=t_end, running=out["running"])


def estimate_cost(problem, policy, cfg: McConfig, workers: int = 1):
    """Streamed cost estimate from ``x0`` over ``[0, T]`` without keeping states."""
    from .problem import check_policy_grid, cost_from_samples

    times = time_grid(0.0, problem.horizon, cfg.n_steps)
    check_policy_grid(policy, times)
    out = run_paths(problem_dynamics(problem, policy), 0.0, problem.horizon,
                    problem.initial_state, cfg, workers=workers)
    running = out["running"] + problem.h(out["terminal"])
    return cost_from_samples(problem, running, out["terminal"])

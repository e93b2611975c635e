"""Forward simulation with the decoupled drift and assembly of ``(p, q)``.

Once the decoupling field ``theta(t, x, y)`` is known, the forward state solves
an ordinary SDE with drift ``b(t, y, theta_x(t, y, y))``; evaluating theta and
its ``y``-gradient at ``y = X(t)`` along each path gives the random fields.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from ..errors import ConfigError
from ..sde import Dynamics, McConfig, run_paths
from .grid import GridConfig, PdeSolution, decoupled_drift, solve_decoupling_pde
from .spec import FbspdeSpec


@dataclass
class FbspdeSolution:
    """Paths ``X`` with ``p(t_k, x_i; path) = theta(t_k, x_i, X_k)`` and ``q = sigma(t_k, X_k) theta_y``.

    ``p`` and ``q`` have shape ``(n_steps + 1, n_paths, N)`` and are built on
    first access; ``p_at`` and ``q_at`` give single time levels.
    """

    times: np.ndarray
    states: np.ndarray  # (P, n_steps + 1)
    pde: PdeSolution
    spec: FbspdeSpec
    provenance: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def x_grid(self) -> np.ndarray:
        return self.pde.x

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def p_at(self, k: int) -> np.ndarray:
        return self.pde.slice_along_y(self.pde.theta, float(self.times[k]), self.states[:, k])

    def q_at(self, k: int) -> np.ndarray:
        t = float(self.times[k])
        sig = self.spec.sigma(t, self.states[:, k])
        return sig[:, None] * self.pde.slice_along_y(self.pde.theta_y, t, self.states[:, k])

    @cached_property
    def p(self) -> np.ndarray:
        return np.stack([self.p_at(k) for k in range(len(self.times))])

    @cached_property
    def q(self) -> np.ndarray:
        return np.stack([self.q_at(k) for k in range(len(self.times))])

    def on_path(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """``(theta(t_k, X_k, X_k), sigma theta_y(t_k, X_k, X_k))`` per path."""
        t = float(self.times[k])
        y = self.states[:, k]
        val = self.pde.theta_at(t, y, y)
        return val, self.spec.sigma(t, y) * self.pde.field_at(self.pde.theta_y, t, y, y)

    def to_csv(self, path, max_paths: Optional[int] = None) -> None:
        """Columns ``path, step, t, x, p_diag, q_diag`` with the fields taken at ``x = X(t)``."""
        P = self.n_paths if max_paths is None else min(self.n_paths, int(max_paths))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "t", "x", "p_diag", "q_diag"])
            for k, t in enumerate(self.times):
                pd, qd = self.on_path(k)
                for i in range(P):
                    w.writerow([i, k, repr(float(t)), repr(float(self.states[i, k])),
                                repr(float(pd[i])), repr(float(qd[i]))])


def run_three_step(spec: FbspdeSpec, grid: Optional[GridConfig], mc: McConfig,
                   pde: Optional[PdeSolution] = None, workers: int = 1) -> FbspdeSolution:
    """Solve for theta (unless ``pde`` is given), simulate the forward state, assemble the fields."""
    spec.require_scalar()
    if pde is None:
        pde = solve_decoupling_pde(spec, grid)
    elif abs(pde.t_grid[-1] - spec.horizon) > 1e-12:
        raise ConfigError("pde horizon does not match the spec")

    def drift(t, x, u):
        return decoupled_drift(pde, spec, t, x[:, 0])[:, None]

    def diffusion(t, x):
        return spec.sigma(t, x[:, 0])[:, None, None]

    dyn = Dynamics(drift=drift, diffusion=diffusion, state_dim=1, noise_dim=1)
    out = run_paths(dyn, 0.0, spec.horizon, [spec.initial_state], mc,
                    keep_states=True, workers=workers)
    states = out["states"][:, :, 0]
    prov = {"grid": pde.metadata(), "seed": mc.seed, "n_paths": mc.n_paths, "n_steps": mc.n_steps,
            "spec": spec.name}
    return FbspdeSolution(times=out["times"], states=states, pde=pde, spec=spec, provenance=prov,
                          warnings=list(pde.warnings))

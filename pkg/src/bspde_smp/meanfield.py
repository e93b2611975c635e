"""Terminal-mean consistency for mean-field costs and the Example (E) closed forms.

A mean-field cost G(E[X(T)]) makes the optimal control depend on the very
terminal mean it produces.  With ``m`` a guess for E[X(T)], the candidate
control minimises the extended Hamiltonian with G's gradient frozen at ``m``;
the consistency residual is ``m - E[X(T)]`` under that control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BracketError, ConfigError, DivergenceError
from .problem import ControlPolicy, ControlProblem
from .sde import McConfig, run_paths, problem_dynamics
from .smp import TerminalCostate, minimize_batch

# values printed in the source example; kept for side-by-side reporting only
PAPER_VALUES = {"m_star": -0.58462, "u_bar": 0.58462, "J": -0.29}


def _example_e_control(m: float, lo: float, hi: float) -> float:
    return min(max(-m * math.exp(-m * m) - 1.0, lo), hi)


def example_e_residual(m: float, horizon: float = 1.0, x0: float = 0.0,
                       lo: float = -2.0, hi: float = 2.0) -> float:
    """``m - E[X(T)]`` for the built-in example; ``m + m e^{-m²} + 1`` by default."""
    return m - x0 - horizon * _example_e_control(m, lo, hi)


def candidate_policy(problem: ControlProblem, m, costate: Optional[Callable] = None) -> ControlPolicy:
    """Feedback minimiser of the extended Hamiltonian with G's gradient at ``m``.

    The default costate model (``theta_x = h_x``, ``g_x = I``) is exact when
    drift, diffusion and running cost do not depend on the state.
    """
    costate = costate or TerminalCostate(problem)
    g_grad = problem.G_grad(m)

    def fn(t, x):
        return minimize_batch(problem, t, x, costate(t, x).p_eff(g_grad))

    return ControlPolicy.feedback(fn)


def consistency_residual(problem: ControlProblem, m, cfg: Optional[McConfig] = None, *,
                         analytic: bool = False, costate: Optional[Callable] = None,
                         workers: int = 1, return_se: bool = False):
    """``m - E[X(T)]`` under the candidate control for ``m``.

    ``analytic=True`` is available for the built-in example and returns a
    float; Monte Carlo mode returns a length-``n`` vector (and its standard
    error when ``return_se``).
    """
    if analytic:
        if problem.name != "example_e":
            raise ConfigError("analytic residual is only available for example_e")
        p = problem.params
        r = example_e_residual(float(np.atleast_1d(m)[0]), p["horizon"], p["x0"], p["u_lower"], p["u_upper"])
        return (r, 0.0) if return_se else r
    if cfg is None:
        raise ConfigError("Monte Carlo residual needs an McConfig")
    m = np.atleast_1d(np.asarray(m, dtype=float))
    policy = candidate_policy(problem, m, costate)
    dyn = problem_dynamics(problem, policy, with_cost=False)
    out = run_paths(dyn, 0.0, problem.horizon, problem.initial_state, cfg, workers=workers)
    xt = out["terminal"]
    r = m - xt.mean(axis=0)
    if return_se:
        return r, xt.std(axis=0, ddof=1) / math.sqrt(xt.shape[0])
    return r


@dataclass
class FixedPointResult:
    m_star: np.ndarray
    residual: float
    iterations: int
    method: str
    history: list = field(default_factory=list)
    tol: float = 0.0
    converged: bool = True
    notes: list = field(default_factory=list)
    std_error: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "m_star": self.m_star.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "method": self.method,
            "tol": self.tol,
            "converged": self.converged,
            "notes": list(self.notes),
            "history": [[np.atleast_1d(m).tolist(), r] for m, r in self.history],
            "std_error": None if self.std_error is None else np.atleast_1d(self.std_error).tolist(),
        }


def _scalar(r) -> float:
    return float(np.atleast_1d(r)[0])


def _bisect(residual, lo, hi, tol, max_iter, prescan):
    notes = []
    r_lo, r_hi = _scalar(residual(lo)), _scalar(residual(hi))
    if prescan:
        xs = [lo + (hi - lo) * k / (prescan - 1) for k in range(prescan)]
        vals = [_scalar(residual(x)) for x in xs]
        changes = sum(1 for a, b in zip(vals, vals[1:]) if a * b < 0)
        if changes > 1:
            notes.append(f"pre-scan found {changes} sign changes: root may not be unique")
    if r_lo == 0.0:
        return lo, 0.0, 0, [(lo, 0.0)], notes, True
    if r_hi == 0.0:
        return hi, 0.0, 0, [(hi, 0.0)], notes, True
    if r_lo * r_hi > 0:
        raise BracketError(f"no sign change on [{lo}, {hi}]: r={r_lo:.3g}, {r_hi:.3g}")
    history = []
    it = 0
    mid, r_mid = 0.5 * (lo + hi), None
    while hi - lo > tol and it < max_iter:
        mid = 0.5 * (lo + hi)
        r_mid = _scalar(residual(mid))
        it += 1
        history.append((mid, abs(r_mid)))
        if r_mid == 0.0:
            lo = hi = mid
            break
        if (r_mid < 0) == (r_lo < 0):
            lo, r_lo = mid, r_mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    return mid, abs(_scalar(residual(mid))), it, history, notes, hi - lo <= tol


def _picard(residual, init, tol, max_iter, damping):
    m = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    lam = damping
    history = []
    best = (math.inf, m.copy())
    r = np.atleast_1d(residual(m))
    for it in range(1, max_iter + 1):
        norm = float(np.max(np.abs(r)))
        history.append((m.copy(), norm))
        if norm < best[0]:
            best = (norm, m.copy())
        if norm <= tol:
            return m, norm, it - 1, history, True, lam
        if len(history) > 5 and norm > 10 * history[-6][1]:
            lam *= 0.5
            if lam < damping / 64:
                raise DivergenceError("damped Picard iteration diverged", [h[1] for h in history])
            m = best[1].copy()
            r = np.atleast_1d(residual(m))
            continue
        m = m - lam * r
        r = np.atleast_1d(residual(m))
    norm = float(np.max(np.abs(r)))
    history.append((m.copy(), norm))
    return m, norm, max_iter, history, norm <= tol, lam


def solve_fixed_point(residual: Callable, *, bracket=None, init=None, tol: float = 1e-10,
                      max_iter: int = 200, damping: float = 0.5, prescan: int = 64) -> FixedPointResult:
    """Root of ``residual`` by bisection (scalar bracket) or damped Picard.

    Bisection stops once the bracket is narrower than ``tol``, so it performs
    ``ceil(log2(width / tol))`` halvings.  Picard iterates
    ``m <- m - damping * residual(m)`` until ``|residual| <= tol``; the damping
    is halved whenever the residual grows tenfold over five iterations.
    An unconverged run is returned with ``converged=False``.
    """
    if bracket is not None:
        lo, hi = float(bracket[0]), float(bracket[1])
        if not lo < hi:
            raise BracketError("bracket must satisfy lo < hi")
        m, res, it, hist, notes, ok = _bisect(residual, lo, hi, tol, max_iter, prescan)
        return FixedPointResult(np.array([m]), res, it, "bisection", hist, tol, ok, notes)
    if init is None:
        raise ConfigError("need a bracket or an initial guess")
    m, res, it, hist, ok, lam = _picard(residual, init, tol, max_iter, damping)
    notes = [] if lam == damping else [f"damping reduced to {lam:g}"]
    return FixedPointResult(m, res, it, "damped_picard", hist, tol, ok, notes)


@dataclass(frozen=True)
class ExampleEClosedForms:
    """Explicit solution of the built-in example given the terminal mean ``m_star``."""

    m_star: float
    u_bar: float
    horizon: float = 1.0
    x0: float = 0.0
    N: float = 1.0

    def M(self, t) -> np.ndarray:
        return 0.5 * (self.u_bar + 1.0) ** 2 * (self.horizon - np.asarray(t, dtype=float))

    def L(self, t) -> np.ndarray:
        return self.u_bar * (self.horizon - np.asarray(t, dtype=float))

    def theta(self, t, x) -> np.ndarray:
        return self.M(t) + 0.0 * np.asarray(x, dtype=float)

    def g(self, t, x) -> np.ndarray:
        return self.N * np.asarray(x, dtype=float) + self.L(t)

    def psi(self, t, x) -> np.ndarray:
        return 0.0 * np.asarray(x, dtype=float)

    eta = psi

    def adjoint_p(self, t=None) -> float:
        """Constant adjoint process ``theta_x + G'(m) g_x = m e^{-m²}``."""
        return self.m_star * math.exp(-self.m_star ** 2)

    def adjoint_q(self, t=None) -> float:
        return 0.0

    @property
    def J(self) -> float:
        g0 = float(self.g(0.0, self.x0))
        return float(self.M(0.0)) - 0.5 * math.exp(-g0 * g0)

    def to_dict(self) -> dict:
        return {
            "m_star": self.m_star,
            "u_bar": self.u_bar,
            "N": self.N,
            "M0": float(self.M(0.0)),
            "L0": float(self.L(0.0)),
            "J": self.J,
            "psi": 0.0,
            "eta": 0.0,
        }


def example_e_closed_forms(m_star, horizon: float = 1.0, x0: float = 0.0,
                           lo: float = -2.0, hi: float = 2.0) -> ExampleEClosedForms:
    m = float(np.atleast_1d(m_star)[0])
    return ExampleEClosedForms(m_star=m, u_bar=_example_e_control(m, lo, hi), horizon=horizon, x0=x0)

"""Exception types raised across the package."""

from __future__ import annotations


class BspdeSmpError(Exception):
    """Base class for all package errors."""


class ConfigError(BspdeSmpError, ValueError):
    """Invalid user-facing configuration (CLI exit code 2)."""


class GridMismatchError(BspdeSmpError, ValueError):
    """A policy breakpoint or sampled path does not sit on the expected time grid."""


class SimulationError(BspdeSmpError, FloatingPointError):
    """A simulated state became non-finite."""

    def __init__(self, path: int, step: int, time: float):
        self.path = path
        self.step = step
        self.time = time
        super().__init__(f"non-finite state on path {path} at step {step} (t={time:.6g})")


class BracketError(BspdeSmpError, ValueError):
    """The bisection bracket does not contain a sign change."""


class DivergenceError(BspdeSmpError, RuntimeError):
    """An iteration diverged; ``history`` holds the residual trail."""

    def __init__(self, message: str, history=None):
        self.history = list(history or [])
        super().__init__(message)


class CFLError(BspdeSmpError, ValueError):
    """Explicit time step exceeds the stability bound."""

    def __init__(self, dt: float, admissible_dt: float):
        self.dt = dt
        self.admissible_dt = admissible_dt
        super().__init__(
            f"time step {dt:.6g} violates the explicit stability bound; "
            f"admissible dt <= {admissible_dt:.6g}"
        )


class QuadratureError(BspdeSmpError, ValueError):
    """Kernel quadrature box does not capture enough mass."""

"""Exception hierarchy shared by every engine and the CLI."""

from __future__ import annotations


class CellflowError(Exception):
    """Base class for all library errors."""


class ConfigError(CellflowError):
    """Malformed or inconsistent scenario / topology configuration."""


class UnstableError(CellflowError):
    """The single-cell occupancy process has no stationary regime.

    Raised when the total static load reaches 1.
    """

    def __init__(self, message: str, rho_static: float | None = None):
        super().__init__(message)
        self.rho_static = rho_static


class InfeasibleError(CellflowError):
    """No fixed point can exist: total fresh load is not below 1."""

    def __init__(self, message: str, cell: int | None = None, rho0: float | None = None):
        super().__init__(message)
        self.cell = cell
        self.rho0 = rho0


class NonConvergenceError(CellflowError):
    """An iterative solver ran out of iterations."""

    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class ExcessTailMassError(CellflowError):
    """Boundary probability of a truncated chain exceeds the threshold."""

    def __init__(self, message: str, tail_mass: float):
        super().__init__(message)
        self.tail_mass = tail_mass


class CapExceededError(CellflowError):
    """Truncated state space would exceed the configured state cap."""


class DegenerateKpiError(CellflowError):
    """A KPI identity cannot be evaluated (zero denominator)."""

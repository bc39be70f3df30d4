"""Exception types shared across the package.

Each class maps onto one CLI exit code (see ``coaglab.cli``).
"""

from __future__ import annotations


class CoagError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CoagError, ValueError):
    """Invalid configuration or parameters."""

    exit_code = 2


class DomainError(CoagError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 2


class SolverAbort(CoagError):
    """Integration stopped before reaching ``t_end``."""

    exit_code = 3

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class EscapeAbort(SolverAbort):
    """Too much mass left the truncated lattice."""


class StepSizeUnderflow(SolverAbort):
    """Adaptive step fell below the stiffness floor."""


class SnapshotError(CoagError):
    """Missing or corrupt file in a trajectory directory."""

    exit_code = 4


class InsufficientMass(CoagError):
    """Diagnostic window holds too little mass to be meaningful."""

    exit_code = 5


class KernelBoundViolation(CoagError):
    """Kernel fails one of the bound or homogeneity checks."""

    exit_code = 6

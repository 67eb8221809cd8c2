"""Shared exception types.

The CLI maps these onto process exit codes, so modules raise the shared
types instead of bare RuntimeErrors when the failure class matters:
``NumericalError`` for NaN/Inf/divergence (exit 3) and
``NonConvergenceError`` for iteration limits (exit 4).
"""


class MongeLabError(Exception):
    """Base class for package-specific failures."""


class ShapeMismatchError(MongeLabError):
    """An operation received operands with incompatible shapes.

    The message names the offending operation so graph construction bugs
    are traceable without a debugger.
    """


class GraphStateError(MongeLabError):
    """An operation was called in the wrong order, e.g. backward before
    any recorded forward."""


class NumericalError(MongeLabError):
    """NaN/Inf appeared where finite values are required, or an iteration
    diverged beyond recovery."""


class NonConvergenceError(MongeLabError):
    """An iterative solver hit its iteration budget before reaching the
    requested tolerance."""

    def __init__(self, message: str, violation: float | None = None):
        super().__init__(message)
        self.violation = violation

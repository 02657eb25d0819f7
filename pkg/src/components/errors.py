"""Exception hierarchy shared by the library and the command-line driver.

Every exception carries the process exit code the driver reports when it
escapes a subcommand: 2 for invalid input, 3 for budget-limited (partial)
results and 4 for numerical failures.
"""

from typing import Any, Optional

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BUDGET = 3
EXIT_NUMERIC = 4


class FloquetLabError(Exception):
    """Base class of all errors raised by the package."""

    exit_code = 1


class ValidationError(FloquetLabError, ValueError):
    """Invalid parameter, configuration key or input object."""

    exit_code = EXIT_VALIDATION

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class GeometryError(ValidationError):
    """Operator and state geometries (half line / full line) do not match."""


class DomainError(ValidationError):
    """Argument outside the domain of a transform, e.g. |z| = 1."""


class BudgetExceededError(FloquetLabError):
    """A dimension, time or exponent budget would be exceeded.

    The partially computed result, if any, is attached so that callers can
    still write it out with a partial status.
    """

    exit_code = EXIT_BUDGET

    def __init__(self, message: str, partial: Any = None):
        super().__init__(message)
        self.partial = partial


class ConstructionFailure(BudgetExceededError):
    """The inductive construction could not produce the next stage."""


class NumericFailure(FloquetLabError, ArithmeticError):
    """A numerical routine failed its accuracy or finiteness contract."""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FitError(NumericFailure):
    """Envelope fit is undefined (too short or identically zero)."""


class PoleError(NumericFailure):
    """Vanishing denominator in a Moebius transform."""

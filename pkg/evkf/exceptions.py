"""Exceptions raised by the evkf package."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .simulate import Trajectory


class EvkfError(Exception):
    """Base class for all evkf errors."""


class InvalidParameterError(EvkfError, ValueError):
    """Natural or mean parameters outside the family's valid domain."""


class DomainError(EvkfError, ValueError):
    """A value lies outside a support or a closed form's domain."""


class ShapeError(EvkfError, ValueError):
    """Array shapes do not chain."""


class FamilyMismatchError(EvkfError, ValueError):
    """Two objects that must share a family tag do not."""


class NumericError(EvkfError, ArithmeticError):
    """Non-finite values or an iteration that failed to converge.

    Attributes:
        last_valid: The last valid intermediate result, when one exists.
    """

    def __init__(self, message: str, last_valid: Any = None) -> None:
        """Initialize the error with an optional partial result."""
        super().__init__(message)
        self.last_valid = last_valid


class SimulationError(EvkfError):
    """A rollout left the support of its dynamics.

    Attributes:
        trajectory: The rollout truncated before the offending step.
    """

    def __init__(self, message: str, trajectory: Trajectory | None = None) -> None:
        """Initialize the error with the truncated trajectory."""
        super().__init__(message)
        self.trajectory = trajectory


class ConfigError(EvkfError):
    """Invalid run configuration.

    Attributes:
        path: Dotted key path of the offending entry, if known.
        line: Line number in the JSON document, for syntax errors.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None) -> None:
        """Initialize the error with location information."""
        location = ""
        if line is not None:
            location = f" (line {line})"
        elif path:
            location = f" (at '{path}')"
        super().__init__(f"{message}{location}")
        self.path = path
        self.line = line

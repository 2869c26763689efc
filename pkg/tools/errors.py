"""
Semi-Implicit Studio - Error Vocabulary

Every exception raised on purpose by the library derives from SiviError.
Precondition failures are also ValueErrors so callers that only know the
standard library still catch them.
"""

from __future__ import annotations

from typing import Any, Optional


class SiviError(Exception):
    """Base class for all library errors."""


class ShapeError(SiviError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class NotReparameterizableError(SiviError, ValueError):
    """A pathwise sample was requested from a family that has none."""


class MissingHooksError(SiviError, ValueError):
    """No closed-form conjugate expectations exist for the model/conditional pair."""


class NonFiniteError(SiviError, ValueError):
    """A function that must stay finite produced NaN or infinity."""


class TrainingDiverged(SiviError):
    """The surrogate bound became NaN; the finite part of the trace is kept."""

    def __init__(self, message: str, trace: Optional[list[float]] = None, iteration: int = -1):
        super().__init__(message)
        self.trace = list(trace or [])
        self.iteration = iteration


class ConfigError(SiviError):
    """A run configuration failed schema or cross-field validation."""

    def __init__(self, message: str, errors: Optional[list[dict[str, Any]]] = None):
        super().__init__(message)
        self.errors = list(errors or [])

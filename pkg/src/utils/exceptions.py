"""Error hierarchy shared by every module.

Each error also derives from the closest builtin so callers that only know
about ``ValueError``/``IndexError`` keep working.
"""

from __future__ import annotations

from typing import Any


class DCNError(Exception):
    """Base class for all library errors."""


class ShapeError(DCNError, ValueError):
    """Invalid shape, rank, axis or dimension mismatch."""


class RangeError(DCNError, IndexError):
    """A window or index falls outside the tensor."""


class ParameterError(DCNError, ValueError):
    """A numeric parameter or label is outside its valid range."""


class ConfigurationError(DCNError, ValueError):
    """Inconsistent or unsupported configuration."""


class InfeasibleArchitectureError(ConfigurationError):
    def __init__(self, layer_name: str, shape: tuple[int, ...]):
        self.layer_name = layer_name
        self.shape = shape
        super().__init__(f"Layer '{layer_name}' produces non-positive shape {shape}")


class IncompatibleTransplantError(ConfigurationError):
    def __init__(self, layer_name: str, detail: str, report: Any = None):
        self.layer_name = layer_name
        self.report = report
        super().__init__(f"Cannot transplant into layer '{layer_name}': {detail}")


class FormatError(DCNError, ValueError):
    """Corrupt, truncated or unsupported file contents."""


class ParseError(FormatError):
    def __init__(self, path: str, line_number: int, message: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


class ValidationError(DCNError, ValueError):
    """Well-formed input that violates a data invariant."""


class UndefinedAPError(DCNError, ValueError):
    """Average precision requested for a ranking with no positives."""


class EmptyVideoError(DCNError, ValueError):
    """A video without any frame was passed to prediction."""

"""
Exception hierarchy shared by every facessd component.

Each error also derives from the closest builtin so callers that only know
about ValueError / OSError keep working.
"""
from pathlib import Path
from typing import Optional, Union


class FaceSSDError(Exception):
    """Base class for all facessd errors."""

    kind = "facessd"


class ShapeError(FaceSSDError, ValueError):
    """Tensor or geometry shapes do not agree."""

    kind = "shape"


class DomainError(FaceSSDError, ValueError):
    """A value lies outside the domain of an operation (log of 0, zero variance, ...)."""

    kind = "domain"


class NonFiniteError(FaceSSDError, FloatingPointError):
    """NaN or Inf appeared in a forward or backward pass."""

    kind = "nan"


class ConfigError(FaceSSDError, ValueError):
    """Invalid or inconsistent configuration."""

    kind = "config"


class SerializationError(FaceSSDError, ValueError):
    """A tensor or weights file could not be encoded or decoded."""

    kind = "serialization"


class UsageError(FaceSSDError, ValueError):
    """The command line could not be parsed."""

    kind = "usage"


class GenerationError(FaceSSDError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""

    kind = "generation"


class DatasetFormatError(FaceSSDError, ValueError):
    """
    Malformed dataset file.

    Carries the offending path and, for text files, the 1-based line and column.
    """

    kind = "dataset"

    def __init__(
        self,
        message: str,
        path: Optional[Union[str, Path]] = None,
        line: Optional[int] = None,
        column: Optional[int] = None
    ):
        self.path = str(path) if path is not None else None
        self.line = line
        self.column = column

        location = ""
        if self.path:
            location = self.path
            if line is not None:
                location += f":{line}"
                if column is not None:
                    location += f":{column}"
            location += ": "
        super().__init__(f"{location}{message}")

"""Exception types shared across the package."""
from __future__ import annotations


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(FloatingPointError):
    """A NaN or infinite value reached an operation that forbids it."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ParseError(ValueError):
    """An input file could not be parsed."""

    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class TokenizerError(ValueError):
    """A word is not in the closed prompt vocabulary."""


class ConstructionError(RuntimeError):
    """An MCQ instance could not be built under the configured constraints."""


class IntegrityError(ValueError):
    """A checkpoint or dataset file is truncated, corrupt or of the wrong version."""


class TrainingError(RuntimeError):
    """Training was aborted, e.g. because the loss became non-finite."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given targets (for example single-class AUC)."""


class StateError(ValueError):
    """Optimizer state does not match the parameters it tracks."""


__all__ = [
    "ConfigError",
    "ConstructionError",
    "IntegrityError",
    "NumericError",
    "ParseError",
    "ShapeError",
    "StateError",
    "TokenizerError",
    "TrainingError",
    "UndefinedMetricError",
]

"""Exception types shared across the toolkit.

Every error raised by library code is one of these, so the CLI can map any
failure to a single-line reason and a nonzero exit code.
"""


class MoskitError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(MoskitError, ValueError):
    """An argument violates a documented precondition."""


class FormatError(MoskitError, ValueError):
    """A file does not conform to its declared on-disk schema."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(message if path is None else f"{path}: {message}")


class NumericError(MoskitError, ArithmeticError):
    """A computation produced non-finite values; carries the layer name."""

    def __init__(self, message: str, layer: str | None = None):
        self.layer = layer
        super().__init__(message if layer is None else f"layer '{layer}': {message}")


class UndefinedMetricError(MoskitError, ValueError):
    """A metric is mathematically undefined for the given inputs."""

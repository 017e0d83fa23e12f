"""
Error types raised across anodet.

Every failure the library reports on purpose derives from ``AnodetError`` so
the command line can map it onto an exit status.
"""

from typing import Any, Optional, Sequence


class AnodetError(Exception):
    """Base class for anodet errors."""
    pass


class ConfigurationError(AnodetError):
    """An invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(AnodetError):
    """A tensor whose shape does not match what the network was built for."""

    def __init__(self, what: str, expected: Sequence[Any], actual: Sequence[Any]):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{what}: expected shape {self.expected}, got {self.actual}")


class NumericError(AnodetError):
    """A non-finite loss, gradient or score."""

    def __init__(self, message: str, row: Optional[int] = None, breakdown: Any = None):
        self.row = row
        self.breakdown = breakdown
        if row is not None:
            message = f"{message} (batch row {row})"
        if breakdown is not None:
            message = f"{message} | {breakdown}"
        super().__init__(message)


class IngestionError(AnodetError):
    """A dataset tree or image file that cannot be read."""

    EXPECTED_LAYOUT = (
        "<root>/<category>/train/good/*.png\n"
        "<root>/<category>/test/good/*.png\n"
        "<root>/<category>/test/<defect_type>/*.png"
    )

    def __init__(self, message: str, show_layout: bool = True):
        if show_layout:
            message = f"{message}\nExpected layout:\n{self.EXPECTED_LAYOUT}"
        super().__init__(message)


class EvaluationError(AnodetError):
    """Scores and labels that cannot be evaluated (e.g. a single class)."""
    pass


class CheckpointError(AnodetError):
    """A checkpoint that is corrupt, tampered with, or from another format version."""
    pass

"""Exception hierarchy shared by every stage of the pipeline.

Each class carries an ``exit_code`` so the command line front end can map a
failure class to a process status without a lookup table.
"""

from __future__ import annotations

from typing import Any


class DaiError(Exception):
    exit_code = 1


class UsageError(DaiError, ValueError):
    exit_code = 2


class ConfigError(UsageError):
    """Invalid generator or experiment configuration."""


class DataError(DaiError, ValueError):
    exit_code = 3


class UnsupportedFormatError(DataError):
    pass


class TruncatedCaptureError(DataError):
    def __init__(self, offset: int, detail: str = "") -> None:
        self.offset = offset
        msg = f"capture truncated at byte offset {offset}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class NoFlowsError(DataError):
    pass


class ShapeError(DataError):
    pass


class AlignmentError(DataError):
    pass


class SchemaError(DataError):
    def __init__(self, path: str, column: str | None, detail: str) -> None:
        self.path = path
        self.column = column
        where = f"{path}:{column}" if column else path
        super().__init__(f"{where}: {detail}")


class ModelFormatError(DataError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class DomainError(DataError):
    pass


class KeyLengthError(DataError):
    pass


class DegenerateVarianceError(DataError):
    pass


class AnalysisError(DaiError):
    """Failure of a statistical analysis step; carries a diagnostics payload."""

    exit_code = 4

    def __init__(self, message: str, *, stage: str | None = None,
                 diagnostics: dict[str, Any] | None = None) -> None:
        self.stage = stage
        self.diagnostics = diagnostics or {}
        super().__init__(f"[{stage}] {message}" if stage else message)


class EmptyInputError(AnalysisError):
    pass


class CalibrationError(AnalysisError):
    pass


class InsufficientDataError(AnalysisError):
    pass


class PtNotFoundError(AnalysisError):
    pass


class SeqNotFoundError(AnalysisError):
    pass


class KeyNotFoundError(AnalysisError):
    pass


class AmbiguousKeyError(AnalysisError):
    pass


class StaleFieldMapError(AnalysisError):
    pass

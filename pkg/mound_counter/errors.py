"""
Exception hierarchy shared by every module.

Library code raises these; only the CLI turns them into messages and exit
codes (2 for validation problems, 3 for runtime/data problems).
"""

from typing import Iterable, Optional


class MoundCounterError(Exception):
    """Base class for all errors raised by mound_counter."""

    exit_code = 3


class ValidationError(MoundCounterError, ValueError):
    """An argument, config value or input record failed validation."""

    exit_code = 2


class PatchIndexError(MoundCounterError, IndexError):
    """A (row, col) pair outside the patch grid."""

    exit_code = 2


class DataError(MoundCounterError):
    """Runtime failure caused by the content of an input."""


class ParseError(DataError):
    """Malformed JSON or CSV input."""

    def __init__(self, message: str, source: Optional[str] = None,
                 line: Optional[int] = None, field: Optional[str] = None):
        self.source = source
        self.line = line
        self.field = field
        context = []
        if source:
            context.append(str(source))
        if line is not None:
            context.append(f"line {line}")
        if field:
            context.append(f"field '{field}'")
        prefix = ", ".join(context)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class DatasetConsistencyError(DataError):
    """Detections and ground truth do not describe the same patches."""

    def __init__(self, message: str, patch_ids: Iterable[str] = ()):
        self.patch_ids = list(patch_ids)
        if self.patch_ids:
            message = f"{message}: {', '.join(self.patch_ids)}"
        super().__init__(message)


class InsufficientDataError(DataError):
    """Too few samples to fit a model."""


class UnsupportedVersionError(DataError):
    """A persisted artifact declares a format version this build cannot read."""


class DegenerateGeometryError(DataError):
    """Geometry with zero area where a positive area is required."""


class UndefinedMetricError(DataError):
    """A metric is undefined for the given inputs (e.g. zero ground truth)."""


class GenerationError(DataError):
    """Synthetic block generation could not satisfy its parameters."""

    def __init__(self, message: str, block_index: Optional[int] = None):
        self.block_index = block_index
        if block_index is not None:
            message = f"block {block_index}: {message}"
        super().__init__(message)

"""Exception family shared by every probe-gap-lab module.

Each class also derives from the builtin exception a caller would naturally
catch, so ``except ValueError`` around a config load keeps working.
"""

from typing import Any


class ProbeLabError(Exception):
    """Base class for all errors raised by the laboratory."""


class DimensionError(ProbeLabError, ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class ContractError(ProbeLabError, ValueError):
    """Raised when a documented pre-condition of an operation is violated."""


class ConfigError(ProbeLabError, ValueError):
    """Raised for invalid model, experiment, group or schedule configuration."""


class NumericError(ProbeLabError, ArithmeticError):
    """Raised when a gradient, loss or parameter becomes non-finite."""


class LengthError(ProbeLabError, ValueError):
    """Raised when a prompt does not fit the model context."""


class SegmentationError(ProbeLabError, ValueError):
    """Raised when a probing curve cannot be split into three layer groups."""


class DatasetFormatError(ProbeLabError, ValueError):
    """Raised when a dataset, manifest or checkpoint file is malformed."""


class ArtifactWriteError(ProbeLabError, OSError):
    """Raised when an artifact cannot be written to the output directory."""


class FilterError(ProbeLabError, RuntimeError):
    """Raised when hard-sample filtering leaves nothing to keep.

    Attributes:
        stats (dict[str, Any]): Retention statistics gathered before the failure.

    """

    def __init__(self, message: str, stats: dict[str, Any] | None = None) -> None:
        """Store the retention statistics next to the message."""
        super().__init__(message)
        self.stats: dict[str, Any] = dict(stats or {})

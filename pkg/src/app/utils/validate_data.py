"""Validate experiment settings and artifact records before they are used.

The ``validate_*`` helpers return a bool and log the offending field, so a
caller can collect every problem in one pass. :func:`ensure_valid` turns a
failed check into a :class:`ConfigError` or :class:`DatasetFormatError`.
"""

import math
from typing import Any

from app.utils.errors import ConfigError, DatasetFormatError
from app.utils.setup_logger import setup_logger
from app.utils.types import validate_dict

logger = setup_logger(__name__)

MANIFEST_KEYS = ["kind", "seed", "counts", "positives", "checksum"]
GAP_KEYS = ["a_resp", "max_lp", "argmax_layer", "token_type", "gap"]


def validate_positive_int(name: str, value: Any, minimum: int = 1) -> bool:
    """Check that ``value`` is an int (not a bool) of at least ``minimum``.

    Args:
        name (str): Field name used in the log message.
        value (Any): Value to check.
        minimum (int): Smallest accepted value.

    Returns:
        bool: True if valid, False otherwise.

    """
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        logger.error("❌ Invalid %s: %r (expected an integer >= %d)", name, value, minimum)
        return False
    return True


def validate_positive_float(name: str, value: Any) -> bool:
    """Check that ``value`` is a finite number greater than zero."""
    if not _is_number(value) or not math.isfinite(value) or value <= 0:
        logger.error("❌ Invalid %s: %r (expected a positive number)", name, value)
        return False
    return True


def validate_unit_interval(name: str, value: Any) -> bool:
    """Check that ``value`` is a number in [0, 1]."""
    if not _is_number(value) or not 0.0 <= value <= 1.0:
        logger.error("❌ Invalid %s: %r (expected a value in [0, 1])", name, value)
        return False
    return True


def validate_band(low: Any, high: Any) -> bool:
    """Check that ``[low, high]`` is a non-empty sub-interval of [0, 1]."""
    if not (validate_unit_interval("band low", low) and validate_unit_interval("band high", high)):
        return False
    if low > high:
        logger.error("❌ Invalid accuracy band: [%s, %s] is empty", low, high)
        return False
    return True


def validate_manifest(data: Any) -> bool:
    """Validate a dataset manifest read from disk.

    Args:
        data (Any): Parsed JSON document.

    Returns:
        bool: True if every required key is present and the split entries are complete.

    """
    if not isinstance(data, dict) or not validate_dict(data, MANIFEST_KEYS):
        logger.error("❌ Manifest is missing keys; expected %s", MANIFEST_KEYS)
        return False
    for key in ("counts", "positives", "checksum"):
        entry = data[key]
        if not isinstance(entry, dict) or not validate_dict(entry, ["train", "test"]):
            logger.error("❌ Manifest field %s lacks train/test entries", key)
            return False
    return True


def validate_gap_record(data: Any) -> bool:
    """Validate a gap report document (``gap == max_lp - a_resp`` within rounding)."""
    if not isinstance(data, dict) or not validate_dict(data, GAP_KEYS):
        logger.error("❌ Gap record is missing keys; expected %s", GAP_KEYS)
        return False
    if abs(data["max_lp"] - data["a_resp"] - data["gap"]) > 1e-9:
        logger.error("❌ Gap record is inconsistent: %s", data)
        return False
    return True


def ensure_valid(valid: bool, message: str, artifact: bool = False) -> None:
    """Raise when a validation failed.

    Raises:
        ConfigError: For settings (the default).
        DatasetFormatError: When ``artifact`` is True.

    """
    if valid:
        return
    if artifact:
        raise DatasetFormatError(message)
    raise ConfigError(message)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)

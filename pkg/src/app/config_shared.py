"""Runtime settings shared by every command.

Provides typed, cached getter functions that read environment variables
(optionally seeded from a ``.env`` file) and fall back to defaults.
Experiment-level settings live in ``app.config``; these getters only
cover process concerns such as logging, metrics and worker counts.
"""

from functools import lru_cache

from app.utils.config_utils import get_config_bool, get_config_int, get_config_value
from app.utils.types import Precision


@lru_cache
def get_log_level() -> str:
    """Retrieve the logging level name.

    Returns:
        str: Level name such as 'INFO' or 'DEBUG'.

    Defaults to 'INFO' if not set.

    """
    return get_config_value("LOG_LEVEL", "INFO").upper()


@lru_cache
def get_log_format() -> str:
    """Retrieve the log output format ('text' or 'json').

    Defaults to 'text' if not set.
    """
    return get_config_value("LOG_FORMAT", "text").lower()


@lru_cache
def get_structured_logging() -> bool:
    """Retrieve whether structured (JSON) logging is enabled.

    Returns:
        bool: True if STRUCTURED_LOGGING is enabled, else False.

    Defaults to False if not set.

    """
    return get_config_bool("STRUCTURED_LOGGING", False)


@lru_cache
def get_log_file() -> str:
    """Retrieve the optional log file path (empty string disables file logging)."""
    return get_config_value("LOG_FILE", "")


@lru_cache
def get_metrics_enabled() -> bool:
    """Retrieve whether the Prometheus exporter should be started.

    Returns:
        bool: True if METRICS_ENABLED is set to a truthy value.

    Defaults to False if not set; a batch CLI rarely runs long enough to be scraped.

    """
    return get_config_bool("METRICS_ENABLED", False)


@lru_cache
def get_metrics_port() -> int:
    """Retrieve the port for the Prometheus metrics endpoint.

    Returns:
        int: Port number.

    Defaults to 8000 if not set.

    Raises:
        ValueError: If METRICS_PORT is not a valid integer.

    """
    return get_config_int("METRICS_PORT", 8000, minimum=1)


@lru_cache
def get_workers() -> int:
    """Retrieve the default number of parallel jobs.

    Defaults to 1 if not set.

    Raises:
        ValueError: If PROBE_LAB_WORKERS is not a positive integer.

    """
    return get_config_int("PROBE_LAB_WORKERS", 1, minimum=1)


@lru_cache
def get_precision() -> Precision:
    """Retrieve the default tensor precision.

    Returns:
        Precision: Enum value for 'f32' or 'f64'.

    Raises:
        ValueError: If the value is not a valid Precision.

    Defaults to 'f64' if not set.

    """
    raw_value = get_config_value("PROBE_LAB_PRECISION", "f64").lower()
    try:
        return Precision(raw_value)
    except ValueError:
        raise ValueError(
            f"Invalid PROBE_LAB_PRECISION: '{raw_value}'. "
            f"Must be one of: {[p.value for p in Precision]}"
        )


@lru_cache
def get_feature_spill_mb() -> int:
    """Retrieve the in-memory feature store budget in MiB before spilling to disk.

    Defaults to 256 if not set.
    """
    return get_config_int("FEATURE_SPILL_MB", 256, minimum=0)


@lru_cache
def get_default_out_dir() -> str:
    """Retrieve the default output directory for run artifacts.

    Defaults to 'runs/default' if not set.
    """
    return get_config_value("PROBE_LAB_OUT", "runs/default")

"""Environment lookups behind the cached getters in ``app.config_shared``.

A ``.env`` file in the working directory is loaded once, before the first
lookup, and never overrides variables already set in the process.
"""

import os
from functools import lru_cache

from dotenv import load_dotenv

TRUTHY = ("1", "true", "yes", "on")


@lru_cache
def load_env_file(path: str = ".env") -> bool:
    """Load ``path`` into the environment; True if the file existed."""
    return bool(load_dotenv(path, override=False))


def get_config_value(key: str, default: str = "") -> str:
    """Return the environment value of ``key``, or ``default`` when unset."""
    load_env_file()
    return os.getenv(key, default)


def get_config_bool(key: str, default: bool = False) -> bool:
    """Return ``key`` as a flag; any of ``1/true/yes/on`` (any case) counts as set."""
    load_env_file()
    raw = os.getenv(key)
    if raw is None:
        return default
    return raw.strip().lower() in TRUTHY


def get_config_int(key: str, default: int, minimum: int | None = None) -> int:
    """Return ``key`` as an integer.

    Args:
        key (str): Environment variable name.
        default (int): Value used when the variable is unset.
        minimum (Optional[int]): Smallest accepted value.

    Raises:
        ValueError: If the value is not an integer or is below ``minimum``.

    """
    raw = get_config_value(key, str(default)).strip()
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"Invalid {key} value: '{raw}' must be an integer.") from None
    if minimum is not None and value < minimum:
        raise ValueError(f"Invalid {key} value: {value} must be >= {minimum}.")
    return value

"""Logging for the lab: one configured ``app`` logger that every module logger feeds.

Module loggers (``app.probing``, ``app.finetune`` ...) carry no handlers of
their own and propagate to the package logger, so a run log attached with
:func:`attach_run_log` receives every message of a command.
"""

import logging
import sys
from logging import Logger
from logging.handlers import RotatingFileHandler
from pathlib import Path

try:
    from pythonjsonlogger.json import JsonFormatter
except ImportError:
    JsonFormatter = None  # JSON logging fallback

from app import config_shared

ROOT_LOGGER = "app"
PLAIN_FORMAT = "%(asctime)s [%(levelname)s] %(name)s - %(message)s"
JSON_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"
MAX_LOG_BYTES = 5 * 1024 * 1024


def _formatter(structured: bool) -> logging.Formatter:
    if structured and JsonFormatter:
        return JsonFormatter(JSON_FORMAT)
    return logging.Formatter(fmt=PLAIN_FORMAT, datefmt="%Y-%m-%d %H:%M:%S")


def _structured_default() -> bool:
    return config_shared.get_log_format() == "json" or config_shared.get_structured_logging()


def _configure_root(level: int | None, structured: bool | None, log_file: str | None) -> Logger:
    root = logging.getLogger(ROOT_LOGGER)
    if root.handlers:
        return root

    level_name = config_shared.get_log_level()
    resolved = level if level is not None else getattr(logging, level_name, logging.INFO)
    structured = _structured_default() if structured is None else structured
    formatter = _formatter(structured)

    stream_handler = logging.StreamHandler(sys.stdout)
    stream_handler.setFormatter(formatter)
    root.addHandler(stream_handler)

    log_file = log_file if log_file is not None else config_shared.get_log_file()
    if log_file:
        file_handler = RotatingFileHandler(log_file, maxBytes=MAX_LOG_BYTES, backupCount=3)
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

    root.setLevel(resolved)
    root.propagate = False

    if structured and not JsonFormatter:
        root.warning("⚠️ JSON logging requested but 'python-json-logger' is not installed")
    return root


def setup_logger(
    name: str | None = None,
    level: int | None = None,
    structured: bool | None = None,
    log_file: str | None = None,
) -> Logger:
    """Return the logger for ``name``, configuring the package logger on first use.

    Args:
        name (Optional[str]): Logger name, normally ``__name__``.
        level (Optional[int]): Logging level (overrides LOG_LEVEL config).
        structured (Optional[bool]): JSON output (overrides LOG_FORMAT/STRUCTURED_LOGGING).
        log_file (Optional[str]): Rotating log file (overrides LOG_FILE config).

    Returns:
        Logger: A logger whose records reach the package handlers.

    """
    root = _configure_root(level, structured, log_file)
    if not name or name == ROOT_LOGGER:
        return root
    if not name.startswith(ROOT_LOGGER + "."):
        name = f"{ROOT_LOGGER}.{name}"
    return logging.getLogger(name)


def attach_run_log(out_dir: str | Path, command: str) -> logging.Handler:
    """Also write every record of this process to ``<out_dir>/logs/<command>.log``.

    Returns the handler so the caller can detach it with :func:`detach_run_log`.
    """
    root = _configure_root(None, None, None)
    path = Path(out_dir) / "logs" / f"{command}.log"
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(_formatter(_structured_default()))
    root.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    logging.getLogger(ROOT_LOGGER).removeHandler(handler)
    handler.close()

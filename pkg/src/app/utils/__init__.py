"""Initialize the `utils` package for shared laboratory utilities.

Included Utilities:
- setup_logger: Configures logging with plain or structured output.
- errors: Exception family rooted at ProbeLabError.
- types: Task, token-type and precision enums plus JSON record shapes.
- metrics / metrics_server: Prometheus instrumentation and exporter.
- validate_data: Validators for experiment settings and artifact records.
"""

from .setup_logger import setup_logger
from .validate_data import ensure_valid, validate_manifest

__all__ = [
    "setup_logger",
    "ensure_valid",
    "validate_manifest",
]

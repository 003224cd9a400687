"""Atomic artifact writer for the run directory.

Every artifact (datasets, checkpoints, curve tables, reports) goes through
:class:`ArtifactWriter`: the payload is written to a temporary file next to
the target and moved into place with ``os.replace``, so a crashed run never
leaves a half-written file behind. Transient ``OSError`` failures are retried
with exponential backoff.
"""

import json
import os
import tempfile
import time
from pathlib import Path
from typing import Any

import pandas as pd
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from app.utils.errors import ArtifactWriteError
from app.utils.metrics import record_output_metrics
from app.utils.setup_logger import setup_logger

logger = setup_logger(__name__)


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=1, min=1, max=10),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def _atomic_write(path: Path, payload: bytes) -> None:
    """Write ``payload`` to a sibling temp file, fsync it and rename it onto ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


class ArtifactWriter:
    """Writes run artifacts atomically and records write metrics per artifact kind."""

    def write_bytes(self, path: str | Path, data: bytes, kind: str = "artifact") -> str:
        """Write raw bytes.

        Args:
            path (str | Path): Destination file; parent directories are created.
            data (bytes): Payload.
            kind (str): Artifact kind used as the metrics label.

        Returns:
            str: The destination path.

        Raises:
            ArtifactWriteError: If the write still fails after retries.

        """
        target = Path(path)
        start = time.perf_counter()
        try:
            _atomic_write(target, data)
        except OSError as e:
            record_output_metrics(kind, success=False, duration_sec=time.perf_counter() - start)
            logger.error("❌ Failed to write %s artifact %s: %s", kind, target, e)
            raise ArtifactWriteError(f"cannot write {target}: {e}") from e
        record_output_metrics(kind, success=True, duration_sec=time.perf_counter() - start)
        logger.debug("📝 Wrote %s artifact %s (%d bytes)", kind, target, len(data))
        return str(target)

    def write_text(self, path: str | Path, text: str, kind: str = "artifact") -> str:
        return self.write_bytes(path, text.encode("utf-8"), kind=kind)

    def write_json(self, path: str | Path, payload: Any, kind: str = "json") -> str:
        """Write ``payload`` as indented JSON with sorted keys and a trailing newline."""
        text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        return self.write_text(path, text, kind=kind)

    def write_frame(self, path: str | Path, frame: pd.DataFrame, kind: str = "table") -> str:
        """Write a DataFrame as CSV without the index and with ``\\n`` line endings."""
        text = frame.to_csv(index=False, lineterminator="\n")
        return self.write_text(path, text, kind=kind)


artifact_writer = ArtifactWriter()


def write_bytes(path: str | Path, data: bytes, kind: str = "artifact") -> str:
    return artifact_writer.write_bytes(path, data, kind=kind)


def write_text(path: str | Path, text: str, kind: str = "artifact") -> str:
    return artifact_writer.write_text(path, text, kind=kind)


def write_json(path: str | Path, payload: Any, kind: str = "json") -> str:
    return artifact_writer.write_json(path, payload, kind=kind)


def write_frame(path: str | Path, frame: pd.DataFrame, kind: str = "table") -> str:
    return artifact_writer.write_frame(path, frame, kind=kind)


def read_json(path: str | Path) -> Any:
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


__all__ = [
    "ArtifactWriter",
    "artifact_writer",
    "read_json",
    "write_bytes",
    "write_frame",
    "write_json",
    "write_text",
]

"""Prometheus metric definitions for the laboratory pipeline.

Exports counters, gauges and histograms for:
- Backbone forward passes
- Probe training
- Response evaluation
- Fine-tuning steps
- Artifact output
"""

import re

from prometheus_client import REGISTRY, Counter, Gauge, Histogram, generate_latest


def get_prometheus_metrics() -> str:
    """Return all registered Prometheus metrics as a text payload."""
    return generate_latest(REGISTRY).decode("utf-8")


def _sanitize_label(value: str) -> str:
    """Sanitize a string to be Prometheus-compatible label.

    Args:
        value (str): The input string to sanitize.

    Returns:
        str: Sanitized label safe for Prometheus use.

    """
    return re.sub(r"[^\w\-:.]", "_", value)[:64]


# -----------------------------
# Backbone Metrics
# -----------------------------
forward_sequences = Counter(
    "probelab_forward_sequences_total",
    "Total number of sequences run through the transformer backbone.",
)


def record_forward(n_sequences: int) -> None:
    forward_sequences.inc(n_sequences)


# -----------------------------
# Probe Metrics
# -----------------------------
probes_trained = Counter(
    "probelab_probes_trained_total",
    "Total number of linear probes trained by task and token type.",
    ["task", "token_type"],
)


def record_probe(task: str, token_type: str) -> None:
    probes_trained.labels(task=_sanitize_label(task), token_type=_sanitize_label(token_type)).inc()


# -----------------------------
# Response Metrics
# -----------------------------
response_accuracy_gauge = Gauge(
    "probelab_response_accuracy",
    "Most recent response accuracy by task and configuration.",
    ["task", "config"],
)


def record_response_accuracy(task: str, config: str, value: float) -> None:
    response_accuracy_gauge.labels(task=_sanitize_label(task), config=_sanitize_label(config)).set(
        value
    )


# -----------------------------
# Fine-tuning Metrics
# -----------------------------
finetune_step_duration = Histogram(
    "probelab_finetune_step_seconds",
    "Wall-clock duration of one fine-tuning schedule step.",
    ["config"],
    buckets=[1, 5, 15, 60, 300, 900, 3600],
)


def record_finetune_step(config: str, duration_sec: float) -> None:
    finetune_step_duration.labels(config=_sanitize_label(config)).observe(duration_sec)


# -----------------------------
# Output Metrics
# -----------------------------
artifact_writes = Counter(
    "probelab_artifact_writes_total",
    "Total number of artifacts written by kind.",
    ["kind"],
)

artifact_failures = Counter(
    "probelab_artifact_failures_total",
    "Total number of failed artifact writes by kind.",
    ["kind"],
)

artifact_write_duration = Histogram(
    "probelab_artifact_write_seconds",
    "Time taken to write an artifact by kind.",
    ["kind"],
    buckets=[0.001, 0.01, 0.1, 0.5, 1, 5],
)


def record_output_metrics(kind: str, success: bool, duration_sec: float) -> None:
    kind = _sanitize_label(kind)
    if success:
        artifact_writes.labels(kind=kind).inc()
    else:
        artifact_failures.labels(kind=kind).inc()
    artifact_write_duration.labels(kind=kind).observe(duration_sec)

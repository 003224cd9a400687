"""Shared enums, typed records and small validation helpers used across the lab."""

from enum import Enum
from typing import Any, TypedDict


class TaskKind(str, Enum):
    """Task families emitted by the procedural generators."""

    VISUAL_ATTR = "visual_attr"
    WORD_REC = "word_rec"
    STRUCTURE = "structure"
    FIGURE = "figure"
    DOC_QA = "doc_qa"

    @property
    def is_binary(self) -> bool:
        """Return True for the four yes/no probing tasks."""
        return self is not TaskKind.DOC_QA


BINARY_TASKS: tuple[TaskKind, ...] = tuple(k for k in TaskKind if k.is_binary)


class TokenType(str, Enum):
    """Which sequence positions feed a linear probe."""

    IMAGE = "image"
    TEXT = "text"
    ALL = "all"
    LAST = "last"


# Export order for curve tables.
TOKEN_TYPE_ORDER: tuple[TokenType, ...] = (
    TokenType.IMAGE,
    TokenType.TEXT,
    TokenType.ALL,
    TokenType.LAST,
)


class Split(str, Enum):
    """Dataset split."""

    TRAIN = "train"
    TEST = "test"


class Precision(str, Enum):
    """Floating point width used by tensors."""

    F32 = "f32"
    F64 = "f64"


class ScheduleKind(str, Enum):
    """Learning-rate schedule shapes."""

    COSINE = "cosine"
    CONSTANT = "constant"


class NegativeSource(str, Enum):
    """Where word-recognition negatives come from during hard-sample filtering."""

    PERTURBED = "perturbed"
    MISREAD = "misread"


class GapReportDict(TypedDict):
    """JSON form of a gap report."""

    a_resp: float
    max_lp: float
    argmax_layer: int
    token_type: str
    gap: float


class DatasetManifest(TypedDict):
    """Manifest written next to each generated dataset pair."""

    kind: str
    seed: int
    counts: dict[str, int]
    positives: dict[str, int]
    checksum: dict[str, str]


class FinetuneRunDict(TypedDict):
    """JSON form of one fine-tuning run."""

    config: str
    task: str
    budget: float
    total_epochs: int
    step_epochs: list[int]
    step_layers: list[list[int]]
    final_loss: float | None


class ReportRow(TypedDict, total=False):
    """One (task, configuration) row of the run report."""

    task: str
    config: str
    budget: float
    response_accuracy: float
    unparseable_rate: float
    linear_probing_accuracy: float
    argmax_layer: int
    gap: float
    anls: float


def validate_dict(data: dict[str, Any], required_keys: list[str]) -> bool:
    """Check that all required keys exist in a dictionary.

    Args:
        data (dict[str, Any]): Dictionary to validate.
        required_keys (list[str]): Required keys to check.

    Returns:
        bool: True if all required keys are present.

    """
    return all(key in data for key in required_keys)

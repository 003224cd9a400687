"""Response elicitation, label extraction, Gap and ANLS.

Binary questions are wrapped in a fixed yes/no answer template, answered by
greedy decoding and mapped back to 0/1 by a token-boundary scan. Doc-QA
questions are asked as-is and scored with ANLS.
"""

import re
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from typing import Any

import Levenshtein
import pandas as pd

from app import tokenizer
from app.model import Model, generate_batch
from app.utils.errors import ContractError
from app.utils.metrics import record_response_accuracy
from app.utils.setup_logger import setup_logger
from app.utils.types import GapReportDict, TokenType

logger = setup_logger(__name__)

PROMPT_SUFFIX = "If yes, answer 1; if no, answer 0. Please answer with numbers only."

BINARY_MAX_NEW = 4
OPEN_MAX_NEW = 8
ANLS_TAU = 0.5

_POSITIVE = frozenset({"1", "yes"})
_NEGATIVE = frozenset({"0", "no"})
_TOKEN = re.compile(r"[a-z0-9]+")

RESPONSE_COLUMNS = ["index", "question", "generated", "extracted", "label", "correct"]


def format_prompt(question: str) -> str:
    """Append the yes/no answer instruction to ``question``.

    Raises:
        ContractError: If the question is empty.

    """
    if not question or not question.strip():
        raise ContractError("question must be non-empty")
    return f"{question} {PROMPT_SUFFIX}"


def format_open_prompt(question: str) -> str:
    """Prompt for open-ended doc-QA answers: the question itself."""
    if not question or not question.strip():
        raise ContractError("question must be non-empty")
    return question


def extract_label(response: str) -> int | None:
    """Map a generated response to 1, 0 or None (unparseable).

    Words are compared whole and case-insensitively, so "10" matches neither
    polarity. A response naming both polarities, or neither, is unparseable.
    """
    tokens = set(_TOKEN.findall(response.lower()))
    positive = bool(tokens & _POSITIVE)
    negative = bool(tokens & _NEGATIVE)
    if positive == negative:
        return None
    return 1 if positive else 0


@dataclass(frozen=True)
class ResponseRecord:
    index: int
    question: str
    prompt: str
    generated: str
    extracted: int | None
    label: int

    @property
    def correct(self) -> bool:
        return self.extracted is not None and self.extracted == self.label


@dataclass(frozen=True)
class ResponseSummary:
    a_resp: float
    unparseable_rate: float
    n: int


def collect_responses(
    model: Model, ds: Any, max_new: int = BINARY_MAX_NEW, batch_size: int = 32
) -> list[ResponseRecord]:
    """Ask the model every question of a binary dataset.

    Raises:
        ContractError: If the dataset is empty or not a binary task.

    """
    if not ds.samples:
        raise ContractError("cannot evaluate an empty dataset")
    if not ds.kind.is_binary:
        raise ContractError("binary responses need a binary task dataset")

    records: list[ResponseRecord] = []
    for start in range(0, ds.n, batch_size):
        chunk = ds.samples[start : start + batch_size]
        prompts = [format_prompt(s.question) for s in chunk]
        outputs = generate_batch(
            model,
            [tokenizer.encode(p) for p in prompts],
            ds.images(range(start, start + len(chunk))),
            max_new,
        )
        for offset, (sample, prompt, text) in enumerate(zip(chunk, prompts, outputs)):
            records.append(
                ResponseRecord(
                    index=start + offset,
                    question=sample.question,
                    prompt=prompt,
                    generated=text,
                    extracted=extract_label(text),
                    label=int(sample.label),
                )
            )
    return records


def summarize_responses(records: Sequence[ResponseRecord]) -> ResponseSummary:
    """Response accuracy and unparseable rate; unparseable answers count as wrong."""
    if not records:
        raise ContractError("cannot summarize zero responses")
    n = len(records)
    correct = sum(r.correct for r in records)
    unparseable = sum(r.extracted is None for r in records)
    return ResponseSummary(a_resp=correct / n, unparseable_rate=unparseable / n, n=n)


def response_accuracy(model: Model, ds: Any, max_new: int = BINARY_MAX_NEW) -> float:
    """Fraction of samples whose extracted answer equals the label."""
    summary = summarize_responses(collect_responses(model, ds, max_new=max_new))
    record_response_accuracy(ds.kind.value, "adhoc", summary.a_resp)
    return summary.a_resp


def responses_to_frame(records: Sequence[ResponseRecord]) -> pd.DataFrame:
    """Tabular export with columns ``index,question,generated,extracted,label,correct``."""
    rows = [
        {
            "index": r.index,
            "question": r.question,
            "generated": r.generated,
            "extracted": "unparseable" if r.extracted is None else str(r.extracted),
            "label": r.label,
            "correct": int(r.correct),
        }
        for r in records
    ]
    return pd.DataFrame(rows, columns=RESPONSE_COLUMNS)


@dataclass(frozen=True)
class GapReport:
    """Best probing accuracy of one token type against response accuracy."""

    a_resp: float
    max_lp: float
    argmax_layer: int
    token_type: TokenType
    gap: float

    def to_dict(self) -> GapReportDict:
        data = asdict(self)
        data["token_type"] = self.token_type.value
        return GapReportDict(**data)


def gap(curve: Any, a_resp: float, ttype: TokenType | str = TokenType.LAST) -> GapReport:
    """Max-over-layers probing accuracy for ``ttype`` minus ``a_resp``.

    The earliest layer wins ties for the argmax.

    Raises:
        ContractError: If the curve has no entries for ``ttype`` or a_resp is outside [0, 1].

    """
    ttype = TokenType(ttype)
    if not 0.0 <= a_resp <= 1.0:
        raise ContractError(f"a_resp must lie in [0, 1], got {a_resp}")
    series = curve.series(ttype)
    if not series:
        raise ContractError(f"curve has no {ttype.value} entries")
    max_lp = max(series)
    layer = series.index(max_lp)
    return GapReport(
        a_resp=a_resp, max_lp=max_lp, argmax_layer=layer, token_type=ttype, gap=max_lp - a_resp
    )


def collect_open_answers(
    model: Model, ds: Any, max_new: int = OPEN_MAX_NEW, batch_size: int = 32
) -> list[str]:
    """Greedy open-ended answers for every sample of a doc-QA dataset."""
    if not ds.samples:
        raise ContractError("cannot evaluate an empty dataset")
    answers: list[str] = []
    for start in range(0, ds.n, batch_size):
        chunk = ds.samples[start : start + batch_size]
        prompts = [tokenizer.encode(format_open_prompt(s.question)) for s in chunk]
        images = ds.images(range(start, start + len(chunk)))
        answers.extend(generate_batch(model, prompts, images, max_new))
    return answers


def normalized_lev(s: str, t: str) -> float:
    """``1 - distance(s, t) / max(len(s), len(t))``; 1.0 when both are empty."""
    longest = max(len(s), len(t))
    if longest == 0:
        return 1.0
    return 1.0 - Levenshtein.distance(s, t) / longest


def _normalize_answer(text: str) -> str:
    return text.strip().lower()


def anls(
    predictions: Sequence[str],
    golds: Sequence[Sequence[str] | str],
    tau: float = ANLS_TAU,
) -> float:
    """Average normalized Levenshtein similarity with threshold ``tau``.

    Each item scores its best similarity against any gold answer, or 0 when
    that similarity is below ``tau``.

    Raises:
        ContractError: On misaligned or empty inputs, or tau outside [0, 1].

    """
    if len(predictions) != len(golds):
        raise ContractError(f"{len(predictions)} predictions but {len(golds)} gold sets")
    if not predictions:
        raise ContractError("anls needs at least one prediction")
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")

    total = 0.0
    for prediction, gold in zip(predictions, golds):
        answers = [gold] if isinstance(gold, str) else list(gold)
        pred = _normalize_answer(prediction)
        best = max((normalized_lev(pred, _normalize_answer(a)) for a in answers), default=0.0)
        total += best if best >= tau else 0.0
    return total / len(predictions)

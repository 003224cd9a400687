"""Procedural visual-document tasks.

Four binary tasks (visual attributes, word recognition, layout structure,
bar-chart reading) and one open-ended doc-QA track. Every image is drawn on
a 32x32 canvas with Pillow and upscaled (nearest neighbour) when a larger
``image_px`` is configured.

Generators are pure functions of (kind, n, seed, split, config). A sample
belongs to the split whose parity matches the low bit of its content hash,
so no byte-identical sample can land in both splits.
"""

import base64
import hashlib
import math
import re
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from PIL import Image, ImageDraw

from app.glyphs import ALPHABET, DEFAULT_FONT, GLYPH_ROWS
from app.optim import derive_seed
from app.utils.errors import ConfigError, ContractError, DatasetFormatError, FilterError
from app.utils.setup_logger import setup_logger
from app.utils.types import DatasetManifest, NegativeSource, Split, TaskKind

logger = setup_logger(__name__)

CANVAS_PX = 32

PALETTE: dict[str, tuple[int, int, int]] = {
    "black": (0, 0, 0),
    "white": (255, 255, 255),
    "gray": (128, 128, 128),
    "pale green": (152, 251, 152),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "purple": (128, 0, 128),
    "orange": (255, 165, 0),
    "teal": (0, 128, 128),
    "brown": (139, 69, 19),
}
COLOR_NAMES: tuple[str, ...] = tuple(PALETTE)

# Reserved for the structure/doc-QA marker frame; never part of the palette.
MARKER_RGB = (255, 0, 0)

SHAPES: tuple[str, ...] = ("circle", "square", "triangle")
REGION_TYPES: tuple[str, ...] = ("title", "text", "list", "figure", "table")
FIGURE_VARIANTS: tuple[str, ...] = ("minimum", "maximum")

WORD_MIN_LEN = 3
WORD_MAX_LEN = 7

DOC_QA_QUESTION = "What word is in the red box?"
WORD_QUESTION = "Is the text in the image '{}'?"
READ_QUESTION = "What is the text in the image?"
_QUERIED_WORD = re.compile(r"^Is the text in the image '(.*)'\?$")

_LIGHT = ("white", "yellow", "pale green")
_DARK = ("black", "blue", "purple", "brown", "teal")


@dataclass(frozen=True)
class GeneratorConfig:
    """Rendering geometry; ``image_px`` must equal the model's image size."""

    image_px: int = CANVAS_PX

    def __post_init__(self) -> None:
        if self.image_px < CANVAS_PX or self.image_px % CANVAS_PX:
            raise ConfigError(
                f"image_px must be a positive multiple of {CANVAS_PX}, got {self.image_px}"
            )


@dataclass(frozen=True, eq=False)
class TaskSample:
    """One rendered image with its question and answer.

    ``image`` is stored as uint8 RGB; :attr:`grid` gives the [0, 1] view fed to the model.
    """

    image: np.ndarray
    question: str
    kind: TaskKind
    label: int | None = None
    gold_answer: str | None = None

    def __post_init__(self) -> None:
        if self.kind.is_binary:
            if self.label not in (0, 1) or self.gold_answer is not None:
                raise ContractError(
                    f"{self.kind.value} samples carry a 0/1 label and no gold answer"
                )
        elif self.label is not None or not self.gold_answer:
            raise ContractError("doc_qa samples carry a gold answer and no label")
        if self.image.dtype != np.uint8 or self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ContractError(f"sample image must be uint8 [H, W, 3], got {self.image.shape}")

    @property
    def grid(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0

    @property
    def answer(self) -> str:
        """Label as text for binary tasks, the gold answer for doc-QA."""
        return str(self.label) if self.kind.is_binary else str(self.gold_answer)

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.image.tobytes())
        for part in (self.question, self.answer, self.kind.value):
            digest.update(b"\t" + part.encode("utf-8"))
        return digest.hexdigest()


@dataclass
class Dataset:
    """Ordered samples of one task kind and split."""

    kind: TaskKind
    split: Split
    seed: int
    samples: list[TaskSample]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        if not self.kind.is_binary:
            raise ContractError("doc_qa datasets have no binary labels")
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def positives(self) -> int:
        return int(self.labels.sum()) if self.kind.is_binary else 0

    def images(self, indices: Any = None) -> np.ndarray:
        """Stacked [N, H, W, 3] grids in [0, 1] for all or selected samples."""
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.stack([s.grid for s in chosen])


# ---------------------------------------------------------------------------
# Rendering helpers
# ---------------------------------------------------------------------------


def _canvas(color: str = "white") -> tuple[Image.Image, ImageDraw.ImageDraw]:
    img = Image.new("RGB", (CANVAS_PX, CANVAS_PX), PALETTE[color])
    return img, ImageDraw.Draw(img)


def _finish(img: Image.Image, cfg: GeneratorConfig) -> np.ndarray:
    if cfg.image_px != CANVAS_PX:
        img = img.resize((cfg.image_px, cfg.image_px), Image.Resampling.NEAREST)
    return np.asarray(img, dtype=np.uint8).copy()


def _pick(rng: np.random.Generator, options: tuple[str, ...] | list[str]) -> str:
    return options[int(rng.integers(len(options)))]


def _other(rng: np.random.Generator, options: tuple[str, ...] | list[str], exclude: str) -> str:
    return _pick(rng, [o for o in options if o != exclude])


def _random_word(rng: np.random.Generator) -> str:
    length = int(rng.integers(WORD_MIN_LEN, WORD_MAX_LEN + 1))
    return "".join(ALPHABET[i] for i in rng.integers(len(ALPHABET), size=length))


def _bands(rng: np.random.Generator, k: int, min_height: int) -> list[tuple[int, int]]:
    """Split the canvas rows into ``k`` stacked bands (inclusive top/bottom)."""
    extra = CANVAS_PX - k * min_height
    heights = min_height + rng.multinomial(extra, [1.0 / k] * k)
    bounds, top = [], 0
    for h in heights.tolist():
        bounds.append((top, top + h - 1))
        top += h
    return bounds


def _draw_region(
    draw: ImageDraw.ImageDraw, kind: str, box: tuple[int, int, int, int]
) -> None:
    x0, y0, x1, y1 = box
    if kind == "title":
        draw.rectangle([x0, y0, x0 + (x1 - x0) * 3 // 5, y1], fill=PALETTE["black"])
    elif kind == "text":
        for y in range(y0, y1 + 1, 2):
            draw.line([x0, y, x1, y], fill=PALETTE["gray"])
    elif kind == "list":
        for y in range(y0, y1 + 1, 2):
            draw.point((x0, y), fill=PALETTE["blue"])
            draw.line([x0 + 2, y, x1 - 4, y], fill=PALETTE["gray"])
    elif kind == "figure":
        draw.rectangle([x0, y0, x1, y1], fill=PALETTE["teal"])
    else:
        draw.rectangle([x0, y0, x1, y1], outline=PALETTE["black"])
        for x in range(x0 + 6, x1, 6):
            draw.line([x, y0, x, y1], fill=PALETTE["black"])


def _frame(draw: ImageDraw.ImageDraw, top: int, bottom: int) -> None:
    draw.rectangle([0, top, CANVAS_PX - 1, bottom], outline=MARKER_RGB)


# ---------------------------------------------------------------------------
# Per-kind generators
# ---------------------------------------------------------------------------

SampleMaker = Callable[[np.random.Generator, int | None, GeneratorConfig], TaskSample]


def _make_visual_attr(
    rng: np.random.Generator, label: int | None, cfg: GeneratorConfig
) -> TaskSample:
    bg = _pick(rng, COLOR_NAMES)
    fg = _other(rng, COLOR_NAMES, bg)
    shape = _pick(rng, SHAPES)
    size = int(rng.integers(10, 17))
    x0 = int(rng.integers(1, CANVAS_PX - size))
    y0 = int(rng.integers(1, CANVAS_PX - size))
    box = [x0, y0, x0 + size - 1, y0 + size - 1]

    img, draw = _canvas(bg)
    if shape == "circle":
        draw.ellipse(box, fill=PALETTE[fg])
    elif shape == "square":
        draw.rectangle(box, fill=PALETTE[fg])
    else:
        draw.polygon([(x0 + size // 2, y0), (x0, box[3]), (box[2], box[3])], fill=PALETTE[fg])

    attribute = int(rng.integers(3))
    if attribute == 0:
        truth, options, template = bg, COLOR_NAMES, "Is the background {}?"
    elif attribute == 1:
        truth, options, template = fg, COLOR_NAMES, "Is the shape {}?"
    else:
        truth, options, template = shape, SHAPES, "Is the shape a {}?"
    value = truth if label == 1 else _other(rng, options, truth)
    return TaskSample(_finish(img, cfg), template.format(value), TaskKind.VISUAL_ATTR, label=label)


def _make_word_rec(
    rng: np.random.Generator, label: int | None, cfg: GeneratorConfig
) -> TaskSample:
    word = _random_word(rng)
    img, draw = _canvas(_pick(rng, _LIGHT))
    width = DEFAULT_FONT.word_width(word)
    x = int(rng.integers(1, CANVAS_PX - width))
    y = int(rng.integers(1, CANVAS_PX - GLYPH_ROWS))
    DEFAULT_FONT.draw_word(draw, word, x, y, PALETTE[_pick(rng, _DARK)])
    query = word if label == 1 else perturb_word(word, int(rng.integers(2**31)))
    question = WORD_QUESTION.format(query)
    return TaskSample(_finish(img, cfg), question, TaskKind.WORD_REC, label=label)


def _make_structure(
    rng: np.random.Generator, label: int | None, cfg: GeneratorConfig
) -> TaskSample:
    k = int(rng.integers(2, 6))
    bands = _bands(rng, k, min_height=6)
    types = [REGION_TYPES[i] for i in rng.choice(len(REGION_TYPES), size=k, replace=False)]
    target = int(rng.integers(k))

    img, draw = _canvas("white")
    for (top, bottom), region in zip(bands, types):
        _draw_region(draw, region, (2, top + 2, CANVAS_PX - 3, bottom - 2))
    _frame(draw, *bands[target])

    asked = types[target] if label == 1 else _other(rng, REGION_TYPES, types[target])
    question = f"Is the red boxed region a {asked}?"
    return TaskSample(_finish(img, cfg), question, TaskKind.STRUCTURE, label=label)


def _make_figure(
    rng: np.random.Generator, label: int | None, cfg: GeneratorConfig
) -> TaskSample:
    k = int(rng.integers(3, 7))
    bar_colors = [c for c in COLOR_NAMES if c != "white"]
    colors = [bar_colors[i] for i in rng.choice(len(bar_colors), size=k, replace=False)]
    heights = rng.choice(np.arange(4, 29), size=k, replace=False).tolist()
    variant = _pick(rng, FIGURE_VARIANTS)

    img, draw = _canvas("white")
    bar_w = (CANVAS_PX - 2 - (k - 1)) // k
    for i, (color, h) in enumerate(zip(colors, heights)):
        x = 1 + i * (bar_w + 1)
        draw.rectangle([x, CANVAS_PX - 1 - h, x + bar_w - 1, CANVAS_PX - 2], fill=PALETTE[color])

    extreme = int(np.argmin(heights) if variant == "minimum" else np.argmax(heights))
    named = colors[extreme] if label == 1 else _other(rng, colors, colors[extreme])
    question = f"Is {named.title()} the {variant}?"
    return TaskSample(_finish(img, cfg), question, TaskKind.FIGURE, label=label)


def _make_doc_qa(
    rng: np.random.Generator, label: int | None, cfg: GeneratorConfig
) -> TaskSample:
    k = int(rng.integers(2, 4))
    bands = _bands(rng, k, min_height=9)
    words: list[str] = []
    while len(words) < k:
        word = _random_word(rng)
        if word not in words:
            words.append(word)
    target = int(rng.integers(k))

    img, draw = _canvas("white")
    for (top, bottom), word in zip(bands, words):
        y = top + (bottom - top + 1 - GLYPH_ROWS) // 2
        DEFAULT_FONT.draw_word(draw, word, 2, y, PALETTE["black"])
    _frame(draw, *bands[target])
    image = _finish(img, cfg)
    return TaskSample(image, DOC_QA_QUESTION, TaskKind.DOC_QA, gold_answer=words[target])


_MAKERS: dict[TaskKind, SampleMaker] = {
    TaskKind.VISUAL_ATTR: _make_visual_attr,
    TaskKind.WORD_REC: _make_word_rec,
    TaskKind.STRUCTURE: _make_structure,
    TaskKind.FIGURE: _make_figure,
    TaskKind.DOC_QA: _make_doc_qa,
}


def split_parity(sample: TaskSample) -> Split:
    """Split a sample belongs to, from the low bit of its content hash."""
    return Split.TRAIN if int(sample.content_hash()[-1], 16) % 2 == 0 else Split.TEST


def balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffled 0/1 labels with ``n // 2`` positives."""
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    return rng.permutation(labels)


def generate(
    kind: TaskKind | str,
    n: int,
    seed: int,
    cfg: GeneratorConfig | None = None,
    split: Split | str = Split.TRAIN,
) -> Dataset:
    """Generate ``n`` samples of one task kind for one split.

    Raises:
        ConfigError: If ``n < 2``.

    """
    kind, split = TaskKind(kind), Split(split)
    cfg = cfg or GeneratorConfig()
    if n < 2:
        raise ConfigError(f"{kind.value}: need at least 2 samples to balance labels, got {n}")

    rng = np.random.default_rng(derive_seed(seed, "taskgen", kind.value, split.value))
    labels: list[int | None] = (
        balanced_labels(n, rng).tolist() if kind.is_binary else [None] * n
    )
    maker = _MAKERS[kind]
    samples = []
    for label in labels:
        sample = maker(rng, label, cfg)
        while split_parity(sample) is not split:
            sample = maker(rng, label, cfg)
        samples.append(sample)

    ds = Dataset(kind=kind, split=split, seed=seed, samples=samples)
    logger.debug("✅ Generated %s/%s: %d samples", kind.value, split.value, n)
    return ds


def perturb_word(word: str, seed: int) -> str:
    """Apply exactly one edit: substitute a letter, swap an adjacent pair, or delete a letter.

    Transposition is only chosen when an adjacent pair of different letters exists,
    so the result always differs from the input.

    Raises:
        ContractError: If the word is shorter than 3 or has non-alphabet characters.

    """
    if len(word) < 3:
        raise ContractError(f"word {word!r} is too short to perturb")
    if any(ch not in ALPHABET for ch in word):
        raise ContractError(f"word {word!r} has characters outside the alphabet")

    rng = np.random.default_rng(seed)
    swappable = [i for i in range(len(word) - 1) if word[i] != word[i + 1]]
    edits = ["substitute", "delete"] + (["transpose"] if swappable else [])
    edit = _pick(rng, edits)

    if edit == "substitute":
        i = int(rng.integers(len(word)))
        letter = _other(rng, list(ALPHABET), word[i])
        return word[:i] + letter + word[i + 1 :]
    if edit == "transpose":
        i = swappable[int(rng.integers(len(swappable)))]
        return word[:i] + word[i + 1] + word[i] + word[i + 2 :]
    i = int(rng.integers(len(word)))
    return word[:i] + word[i + 1 :]


def mine_misread_negatives(ds: Dataset, model: Any, batch_size: int = 32) -> tuple[Dataset, int]:
    """Replace word-recognition negatives with words the model misreads.

    Every positive image is read back with :data:`READ_QUESTION`. The first
    word of a reading that differs from the rendered word becomes a negative
    query on the same image, provided the new sample keeps the split parity.
    Perturbed negatives are swapped out in dataset order while mined ones last.

    Returns:
        tuple[Dataset, int]: The dataset with swapped negatives and the swap count.

    Raises:
        ContractError: If the dataset is not a word-recognition task.

    """
    from app import response_eval

    if ds.kind is not TaskKind.WORD_REC:
        raise ContractError("misread negatives apply to word recognition only")
    positives = [s for s in ds.samples if s.label == 1]
    if not positives:
        return ds, 0

    reading = Dataset(
        ds.kind,
        ds.split,
        ds.seed,
        [TaskSample(s.image, READ_QUESTION, s.kind, label=1) for s in positives],
    )
    answers = response_eval.collect_open_answers(model, reading, batch_size=batch_size)
    mined: list[TaskSample] = []
    for sample, answer in zip(positives, answers):
        match = _QUERIED_WORD.match(sample.question)
        words = answer.lower().split()
        read = words[0] if words else ""
        if match is None or read == match.group(1) or len(read) < WORD_MIN_LEN:
            continue
        if any(ch not in ALPHABET for ch in read):
            continue
        candidate = TaskSample(sample.image, WORD_QUESTION.format(read), ds.kind, label=0)
        if split_parity(candidate) is ds.split:
            mined.append(candidate)

    samples, swapped = [], 0
    for sample in ds.samples:
        if sample.label == 0 and swapped < len(mined):
            samples.append(mined[swapped])
            swapped += 1
        else:
            samples.append(sample)
    logger.info("📊 Mined %d misread negatives from %d readings", swapped, len(positives))
    return Dataset(ds.kind, ds.split, ds.seed, samples, dict(ds.meta)), swapped


def filter_hard(
    ds: Dataset,
    model: Any,
    batch_size: int = 32,
    negatives: NegativeSource | str = NegativeSource.PERTURBED,
) -> Dataset:
    """Keep the samples the model answers wrongly, then re-balance labels.

    Unparseable answers count as wrong. The retention rate is measured before
    re-balancing and stored in ``meta["filter"]``. With
    ``negatives="misread"`` word-recognition negatives are first replaced by
    the model's own misreadings (see :func:`mine_misread_negatives`).

    Raises:
        ContractError: If the dataset is not a binary task, or misread
            negatives are requested for another task.
        FilterError: If nothing survives; the error carries the statistics.

    """
    from app import response_eval

    negatives = NegativeSource(negatives)
    if not ds.kind.is_binary:
        raise ContractError("hard-sample filtering applies to binary tasks only")
    n_mined = 0
    if negatives is NegativeSource.MISREAD:
        ds, n_mined = mine_misread_negatives(ds, model, batch_size=batch_size)

    records = response_eval.collect_responses(model, ds, batch_size=batch_size)
    wrong = [i for i, (s, r) in enumerate(zip(ds.samples, records)) if r.extracted != s.label]
    stats: dict[str, Any] = {
        "n_in": ds.n,
        "n_incorrect": len(wrong),
        "retention": len(wrong) / ds.n if ds.n else 0.0,
        "negatives": negatives.value,
        "n_mined": n_mined,
    }

    pos = [i for i in wrong if ds.samples[i].label == 1]
    neg = [i for i in wrong if ds.samples[i].label == 0]
    keep_each = min(len(pos), len(neg))
    keep = pos[:keep_each] + neg[:keep_each]
    larger = pos if len(pos) > keep_each else neg
    if len(larger) > keep_each:
        keep.append(larger[keep_each])
    keep.sort()
    stats["n_out"] = len(keep)
    stats["filtered_out"] = 1.0 - stats["retention"]

    if not keep:
        logger.warning("⚠️ Hard-sample filter kept nothing for %s: %s", ds.kind.value, stats)
        raise FilterError(f"no hard samples left for {ds.kind.value}", stats)

    logger.info(
        "📊 Hard-sample filter on %s kept %d/%d (retention %.1f%%)",
        ds.kind.value,
        len(keep),
        ds.n,
        100 * stats["retention"],
    )
    meta = {**ds.meta, "filter": stats}
    return Dataset(ds.kind, ds.split, ds.seed, [ds.samples[i] for i in keep], meta)


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


def dataset_to_tsv(ds: Dataset) -> str:
    """Serialize as ``base64(image)\\tquestion\\tlabel-or-gold\\tkind`` lines."""
    lines = []
    for sample in ds.samples:
        fields = [sample.question, sample.answer, sample.kind.value]
        if any(ch in f for f in fields for ch in "\t\n\r"):
            raise DatasetFormatError(f"sample field contains a tab or newline: {fields!r}")
        payload = base64.b64encode(sample.image.tobytes()).decode("ascii")
        lines.append("\t".join([payload, *fields]))
    return "".join(line + "\n" for line in lines)


def dataset_from_tsv(text: str, split: Split | str, seed: int) -> Dataset:
    """Parse the output of :func:`dataset_to_tsv`.

    Raises:
        DatasetFormatError: On malformed lines, mixed kinds or an empty file.

    """
    samples = []
    kinds = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DatasetFormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        payload, question, answer, kind_tag = parts
        try:
            kind = TaskKind(kind_tag)
            raw = np.frombuffer(base64.b64decode(payload, validate=True), dtype=np.uint8)
        except ValueError as e:
            raise DatasetFormatError(f"line {lineno}: {e}") from e
        side = math.isqrt(raw.size // 3)
        if side * side * 3 != raw.size:
            raise DatasetFormatError(f"line {lineno}: image payload is not square RGB")
        image = raw.reshape(side, side, 3).copy()
        try:
            if kind.is_binary:
                sample = TaskSample(image, question, kind, label=int(answer))
            else:
                sample = TaskSample(image, question, kind, gold_answer=answer)
        except (ValueError, ContractError) as e:
            raise DatasetFormatError(f"line {lineno}: {e}") from e
        samples.append(sample)
        kinds.add(kind)

    if not samples:
        raise DatasetFormatError("dataset file is empty")
    if len(kinds) != 1:
        raise DatasetFormatError(f"dataset mixes task kinds: {sorted(k.value for k in kinds)}")
    return Dataset(kind=kinds.pop(), split=Split(split), seed=seed, samples=samples)


def dataset_checksum(ds: Dataset) -> str:
    return hashlib.sha256(dataset_to_tsv(ds).encode("utf-8")).hexdigest()


def build_manifest(train: Dataset, test: Dataset) -> DatasetManifest:
    """Manifest describing one train/test pair."""
    return DatasetManifest(
        kind=train.kind.value,
        seed=train.seed,
        counts={"train": train.n, "test": test.n},
        positives={"train": train.positives, "test": test.positives},
        checksum={"train": dataset_checksum(train), "test": dataset_checksum(test)},
    )


def write_dataset(ds: Dataset, path: str) -> str:
    from app.output_handler import write_text

    return write_text(path, dataset_to_tsv(ds), kind="dataset")


def read_dataset(path: str, split: Split | str, seed: int) -> Dataset:
    with open(path, encoding="utf-8") as handle:
        return dataset_from_tsv(handle.read(), split, seed)

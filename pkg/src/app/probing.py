"""Layer-wise linear probing.

Hidden states are pooled per token type (image, text, all, last) at every
layer, a two-way linear classifier is trained per (layer, token type) cell on
the train split, and its accuracy on the test split forms the layer-accuracy
curve. Features are extracted with a single forward pass per sample and shared
by every cell of a sweep.
"""

import math
import os
import tempfile
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from app import config_shared, tokenizer
from app.model import HiddenStateCache, Model, SequenceLayout, forward_batch
from app.optim import (
    AdamState,
    LrSchedule,
    adam_step,
    derive_seed,
    scheduled_lr,
    xavier_uniform,
    zeros,
)
from app.response_eval import format_prompt
from app.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    get_default_dtype,
    matmul,
    softmax_cross_entropy,
    transpose,
)
from app.utils.errors import ContractError, DatasetFormatError, DimensionError
from app.utils.metrics import record_probe
from app.utils.setup_logger import setup_logger
from app.utils.types import TOKEN_TYPE_ORDER, ScheduleKind, TaskKind, TokenType

logger = setup_logger(__name__)

CURVE_COLUMNS = ["layer", "token_type", "accuracy", "n_test", "task", "seed"]

# Which positions the all-token pooling covers; recorded in curve metadata.
ALL_TOKEN_SPAN = "image_span+text_span"


@dataclass(frozen=True)
class ProbeSettings:
    """Probe optimizer recipe: Adam, cosine schedule, Xavier weights and zero bias.

    The defaults give a head enough optimizer steps to flip a badly oriented
    Xavier start on a few thousand samples. The large-corpus recipe is
    ``ProbeSettings(lr=1e-3, batch_size=256, epochs=1)``.
    """

    lr: float = 5e-2
    batch_size: int = 32
    epochs: int = 4
    weight_decay: float = 0.0
    schedule: ScheduleKind = ScheduleKind.COSINE


@dataclass(frozen=True)
class ProbeClassifier:
    """Two-way linear head ``z = W h + b``."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        if self.W.ndim != 2 or self.W.shape[0] != 2 or self.b.shape != (2,):
            raise DimensionError(
                f"probe must be W[2, d], b[2]; got {self.W.shape}, {self.b.shape}"
            )

    def logits(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features)
        if x.ndim != 2 or x.shape[1] != self.W.shape[1]:
            raise DimensionError(f"features {x.shape} do not match probe width {self.W.shape[1]}")
        return x @ self.W.T + self.b

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Argmax class; a tie goes to class 0."""
        z = self.logits(features)
        return (z[:, 1] > z[:, 0]).astype(np.int64)


def pool_rows(hidden: np.ndarray, layout: SequenceLayout, ttype: TokenType | str) -> np.ndarray:
    """Pool a ``[T, d]`` hidden-state matrix for one token type."""
    ttype = TokenType(ttype)
    if ttype is TokenType.LAST:
        return hidden[layout.last_index]
    if ttype is TokenType.IMAGE:
        start, stop = layout.image_span
    elif ttype is TokenType.TEXT:
        start, stop = layout.text_span
    else:
        start, stop = layout.image_span[0], layout.text_span[1]
    if stop <= start:
        raise ContractError(f"empty {ttype.value} span")
    return hidden[start:stop].mean(axis=0)


def pool_hidden(
    cache: HiddenStateCache, layout: SequenceLayout, layer: int, ttype: TokenType | str
) -> np.ndarray:
    """Mean of the hidden states over the token type's span at ``layer``.

    The last-token type selects the single state at ``layout.last_index``.
    All-token pooling spans the image and text spans together.

    Raises:
        ContractError: If the layer is out of range or the span is empty.

    """
    return pool_rows(cache.layer(layer), layout, ttype)


def train_probe(
    features: np.ndarray | Sequence[np.ndarray],
    labels: np.ndarray | Sequence[int],
    seed: int,
    settings: ProbeSettings | None = None,
) -> ProbeClassifier:
    """Fit a linear probe with softmax cross-entropy.

    Args:
        features: ``[N, d]`` feature matrix.
        labels: ``N`` binary labels.
        seed: Seeds the Xavier initialization and the mini-batch order.
        settings: Optimizer recipe; defaults to :class:`ProbeSettings`.

    Returns:
        ProbeClassifier: Trained weights (copied out of the tape tensors).

    Raises:
        DimensionError: If features are not ``[N, d]`` or counts differ.
        ContractError: If fewer than 2 samples or labels outside {0, 1}.

    """
    settings = settings or ProbeSettings()
    x = np.asarray(features, dtype=get_default_dtype())
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2:
        raise DimensionError(f"features must be [N, d], got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise DimensionError(f"{x.shape[0]} feature rows but labels of shape {y.shape}")
    if x.shape[0] < 2:
        raise ContractError("a probe needs at least 2 samples")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("probe labels must be 0 or 1")

    n = x.shape[0]
    weight = xavier_uniform((2, x.shape[1]), derive_seed(seed, "probe", "W"))
    bias = zeros((2,))
    w_state, b_state = AdamState.zeros_like(weight), AdamState.zeros_like(bias)
    steps_per_epoch = math.ceil(n / settings.batch_size)
    sched = LrSchedule(settings.lr, steps_per_epoch * settings.epochs, settings.schedule)
    rng = np.random.default_rng(derive_seed(seed, "probe", "order"))

    step = 0
    for _ in range(settings.epochs):
        order = rng.permutation(n)
        for start in range(0, n, settings.batch_size):
            idx = order[start : start + settings.batch_size]
            with Tape() as tape:
                z = add(matmul(Tensor(x[idx]), transpose(weight)), bias)
                loss = softmax_cross_entropy(z, y[idx])
            backward(tape, loss)
            lr = scheduled_lr(step, sched)
            weight, w_state = adam_step(weight, weight.grad, w_state, lr, settings.weight_decay)
            bias, b_state = adam_step(bias, bias.grad, b_state, lr)
            step += 1

    return ProbeClassifier(W=weight.data.copy(), b=bias.data.copy())


def probe_accuracy(
    clf: ProbeClassifier, features: np.ndarray, labels: np.ndarray | Sequence[int]
) -> float:
    """Fraction of samples whose argmax logit equals the label.

    Raises:
        ContractError: If the evaluation set is empty.
        DimensionError: If features and labels disagree in count.

    """
    x = np.asarray(features)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0 or y.size == 0:
        raise ContractError("cannot measure accuracy on an empty evaluation set")
    if y.shape != (x.shape[0],):
        raise DimensionError(f"{x.shape[0]} feature rows but labels of shape {y.shape}")
    return float(np.mean(clf.predict(x) == y))


def shuffled_labels(labels: np.ndarray | Sequence[int], seed: int) -> np.ndarray:
    """Random permutation of ``labels`` (chance-level control)."""
    return np.random.default_rng(seed).permutation(np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


@dataclass
class FeatureStore:
    """Pooled features ``[N, n_layers, 4, d]`` in TOKEN_TYPE_ORDER, in memory or memory-mapped."""

    features: np.ndarray
    labels: np.ndarray
    path: str | None = None

    def cell(self, layer: int, ttype: TokenType | str) -> np.ndarray:
        return np.asarray(self.features[:, layer, TOKEN_TYPE_ORDER.index(TokenType(ttype))])

    def close(self) -> None:
        """Drop a spilled feature file."""
        if self.path is not None:
            del self.features
            os.unlink(self.path)
            self.path = None


def extract_features(
    model: Model,
    ds: Any,
    batch_size: int = 32,
    spill_mb: int | None = None,
) -> FeatureStore:
    """Run every sample through the model once and pool all (layer, token type) cells.

    The prompt is the same templated question used for responses, so probes
    read the states the model answers from. Stores larger than ``spill_mb``
    MiB (default ``FEATURE_SPILL_MB``) are backed by a temporary memmap file.
    """
    if not ds.samples:
        raise ContractError("cannot extract features from an empty dataset")
    cfg = model.cfg
    shape = (ds.n, cfg.n_layers, len(TOKEN_TYPE_ORDER), cfg.d_model)
    dtype = np.dtype(get_default_dtype())
    limit = config_shared.get_feature_spill_mb() if spill_mb is None else spill_mb
    nbytes = int(np.prod(shape)) * dtype.itemsize

    path = None
    if nbytes > limit * 1024 * 1024:
        handle, path = tempfile.mkstemp(prefix="probe-features-", suffix=".dat")
        os.close(handle)
        store: np.ndarray = np.memmap(path, dtype=dtype, mode="w+", shape=shape)
        logger.info("📊 Spilling %.1f MiB of features to %s", nbytes / 2**20, path)
    else:
        store = np.empty(shape, dtype=dtype)

    for start in range(0, ds.n, batch_size):
        chunk = ds.samples[start : start + batch_size]
        prompts = [tokenizer.encode(format_prompt(s.question)) for s in chunk]
        out = forward_batch(model, prompts, ds.images(range(start, start + len(chunk))))
        for row, layout in enumerate(out.layouts):
            for layer, hidden in enumerate(out.hidden):
                states = hidden.data[row]
                for t, ttype in enumerate(TOKEN_TYPE_ORDER):
                    store[start + row, layer, t] = pool_rows(states, layout, ttype)

    labels = ds.labels if ds.kind.is_binary else np.zeros(ds.n, dtype=np.int64)
    return FeatureStore(features=store, labels=labels, path=path)


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------


@dataclass
class LayerAccuracyCurve:
    """Probe accuracy per (layer, token type) for one task."""

    task: TaskKind
    seed: int
    n_layers: int
    n_test: int
    accuracies: dict[tuple[int, TokenType], float]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for (layer, ttype), value in self.accuracies.items():
            if not 0 <= layer < self.n_layers:
                raise ContractError(f"curve layer {layer} outside [0, {self.n_layers})")
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"accuracy {value} at ({layer}, {ttype}) outside [0, 1]")

    def series(self, ttype: TokenType | str) -> list[float]:
        """Accuracies of one token type in layer order ([] when the type is absent)."""
        ttype = TokenType(ttype)
        if not any(t is ttype for _, t in self.accuracies):
            return []
        return [self.accuracies[(layer, ttype)] for layer in range(self.n_layers)]

    def value(self, layer: int, ttype: TokenType | str) -> float:
        return self.accuracies[(layer, TokenType(ttype))]


def curve_to_frame(curve: LayerAccuracyCurve) -> pd.DataFrame:
    """One row per cell, layers ascending, token types in image/text/all/last order."""
    rows = [
        {
            "layer": layer,
            "token_type": ttype.value,
            "accuracy": curve.accuracies[(layer, ttype)],
            "n_test": curve.n_test,
            "task": curve.task.value,
            "seed": curve.seed,
        }
        for layer in range(curve.n_layers)
        for ttype in TOKEN_TYPE_ORDER
        if (layer, ttype) in curve.accuracies
    ]
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def curve_from_frame(frame: pd.DataFrame) -> LayerAccuracyCurve:
    """Rebuild a curve from :func:`curve_to_frame` output."""
    missing = set(CURVE_COLUMNS) - set(frame.columns)
    if missing or frame.empty:
        raise DatasetFormatError(f"curve table is empty or lacks columns {sorted(missing)}")
    accuracies = {
        (int(row.layer), TokenType(row.token_type)): float(row.accuracy)
        for row in frame.itertuples(index=False)
    }
    return LayerAccuracyCurve(
        task=TaskKind(frame["task"].iloc[0]),
        seed=int(frame["seed"].iloc[0]),
        n_layers=int(frame["layer"].max()) + 1,
        n_test=int(frame["n_test"].iloc[0]),
        accuracies=accuracies,
        meta={"all_token_span": ALL_TOKEN_SPAN},
    )


def probe_sweep(
    model: Model,
    train_ds: Any,
    test_ds: Any,
    settings: ProbeSettings | None = None,
    seed: int = 0,
    workers: int | None = None,
    batch_size: int = 32,
) -> LayerAccuracyCurve:
    """Train and evaluate one probe per (layer, token type).

    Features for both splits are extracted once; cells then train in a
    thread pool of ``workers`` (default ``PROBE_LAB_WORKERS``), each with its
    own optimizer state and a seed derived from (seed, task, layer, type).

    Raises:
        ContractError: If the splits belong to different tasks or are not binary.

    """
    if train_ds.kind != test_ds.kind:
        raise ContractError(f"train/test task mismatch: {train_ds.kind} vs {test_ds.kind}")
    if not train_ds.kind.is_binary:
        raise ContractError("probing needs a binary task")
    settings = settings or ProbeSettings()
    workers = workers or config_shared.get_workers()
    kind = TaskKind(train_ds.kind)

    logger.info("🚀 Probe sweep on %s: %d train / %d test", kind.value, train_ds.n, test_ds.n)
    train = extract_features(model, train_ds, batch_size=batch_size)
    test = extract_features(model, test_ds, batch_size=batch_size)

    cells = [(layer, ttype) for layer in range(model.cfg.n_layers) for ttype in TOKEN_TYPE_ORDER]

    def run(cell: tuple[int, TokenType]) -> float:
        layer, ttype = cell
        clf = train_probe(
            train.cell(layer, ttype),
            train.labels,
            seed=derive_seed(seed, kind.value, layer, ttype.value),
            settings=settings,
        )
        record_probe(kind.value, ttype.value)
        return probe_accuracy(clf, test.cell(layer, ttype), test.labels)

    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, cells))
    finally:
        train.close()
        test.close()

    curve = LayerAccuracyCurve(
        task=kind,
        seed=seed,
        n_layers=model.cfg.n_layers,
        n_test=test_ds.n,
        accuracies=dict(zip(cells, results)),
        meta={"all_token_span": ALL_TOKEN_SPAN, "n_train": train_ds.n},
    )
    best = max(curve.series(TokenType.LAST))
    logger.info("✅ Probe sweep on %s done: best last-token accuracy %.4f", kind.value, best)
    return curve

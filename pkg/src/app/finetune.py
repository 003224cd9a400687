"""Layer-group fine-tuning.

The last-token probing curve is split into Lower/Middle/Upper groups at its
two largest rises. Named configurations then fine-tune one group, two
adjacent groups at once, or two groups one after another, always with the
projector frozen and ``lm_head`` trainable, and always for the same total
number of epochs. The effective budget weighs trainable parameters by the
share of epochs they train for.
"""

import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from app.model import LM_HEAD, Model, group_parameter_counts, layer_group, set_trainable
from app.optim import derive_seed
from app.training import EpochLog, TrainSettings, examples_from_dataset, train_answer_span
from app.utils.errors import ConfigError, NumericError, SegmentationError
from app.utils.metrics import record_finetune_step
from app.utils.setup_logger import setup_logger
from app.utils.types import FinetuneRunDict, ScheduleKind, TokenType

logger = setup_logger(__name__)

GROUPS = ("Lower", "Middle", "Upper")

# Canonical configuration names, in report order.
CONFIG_NAMES: tuple[str, ...] = (
    "All",
    "Lower",
    "Middle",
    "Upper",
    "L–M",
    "M–U",
    "L→M",
    "M→L",
    "M→U",
    "U→M",
)

BASE_CONFIG = "Base"

_SINGLE_STEP: dict[str, tuple[str, ...]] = {
    "All": GROUPS,
    "Lower": ("Lower",),
    "Middle": ("Middle",),
    "Upper": ("Upper",),
    "L–M": ("Lower", "Middle"),
    "M–U": ("Middle", "Upper"),
}

_TWO_STEP: dict[str, tuple[str, str]] = {
    "L→M": ("Lower", "Middle"),
    "M→L": ("Middle", "Lower"),
    "M→U": ("Middle", "Upper"),
    "U→M": ("Upper", "Middle"),
}

TWO_STEP_CONFIGS: tuple[str, ...] = tuple(_TWO_STEP)


@dataclass(frozen=True)
class LayerGroupPlan:
    """Half-open layer intervals for the Lower, Middle and Upper groups."""

    lower: tuple[int, int]
    middle: tuple[int, int]
    upper: tuple[int, int]

    def __post_init__(self) -> None:
        (l0, l1), (m0, m1), (u0, u1) = self.lower, self.middle, self.upper
        if not (l0 == 0 and l0 < l1 == m0 < m1 == u0 < u1):
            raise SegmentationError(
                f"groups must partition [0, n) into three non-empty ordered intervals: {self}"
            )

    @property
    def n_layers(self) -> int:
        return self.upper[1]

    def layers(self, group: str) -> range:
        interval = {"Lower": self.lower, "Middle": self.middle, "Upper": self.upper}[group]
        return range(*interval)

    def to_dict(self) -> dict[str, list[int]]:
        return {"lower": list(self.lower), "middle": list(self.middle), "upper": list(self.upper)}


def plan_from_boundaries(n_layers: int, l1: int, l2: int) -> LayerGroupPlan:
    """Plan with the middle group starting at ``l1`` and the upper group at ``l2``."""
    if not 0 < l1 < l2 < n_layers:
        raise SegmentationError(f"boundaries must satisfy 0 < l1 < l2 < {n_layers}, got {l1}, {l2}")
    return LayerGroupPlan((0, l1), (l1, l2), (l2, n_layers))


def segment_series(values: Sequence[float]) -> LayerGroupPlan:
    """Split at the two largest first differences of a per-layer accuracy series.

    ``delta[l] = values[l] - values[l - 1]`` is the rise entering layer ``l``.
    Ties prefer the earlier layer.

    Raises:
        SegmentationError: With fewer than 3 layers or non-finite values.

    """
    series = np.asarray(values, dtype=np.float64)
    if series.ndim != 1 or series.size < 3:
        raise SegmentationError(f"need at least 3 layers to segment, got {series.size}")
    if not np.all(np.isfinite(series)):
        raise SegmentationError("accuracy series contains non-finite values")
    deltas = np.diff(series)
    candidates = sorted(range(1, series.size), key=lambda layer: (-deltas[layer - 1], layer))
    if len(candidates) < 2:
        raise SegmentationError("fewer than two boundary candidates")
    l1, l2 = sorted(candidates[:2])
    return plan_from_boundaries(series.size, l1, l2)


def segment_layers(curve: Any) -> LayerGroupPlan:
    """Segment a layer-accuracy curve by its last-token series."""
    series = curve.series(TokenType.LAST)
    if not series:
        raise SegmentationError("curve has no last-token entries")
    plan = segment_series(series)
    task = getattr(curve.task, "value", curve.task)
    logger.info("📊 Layer groups from %s curve: %s", task, plan)
    return plan


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def canonical_config_name(name: str) -> str:
    """Map ASCII aliases (``L-M``, ``L>M``) and the en-dash/arrow labels to canonical names.

    Raises:
        ConfigError: For unknown names.

    """
    text = name.strip()
    if text in CONFIG_NAMES:
        return text
    for sep, canonical_sep in (("-", "–"), (">", "→")):
        parts = text.split(sep)
        if len(parts) == 2:
            candidate = f"{parts[0]}{canonical_sep}{parts[1]}"
            if candidate in CONFIG_NAMES:
                return candidate
    raise ConfigError(f"Unknown fine-tuning configuration: {name!r}")


def config_slug(name: str) -> str:
    """Filesystem-safe label: ``L–M`` -> ``L-M``, ``L→M`` -> ``L_to_M``."""
    if name == BASE_CONFIG:
        return name
    return canonical_config_name(name).replace("–", "-").replace("→", "_to_")


@dataclass(frozen=True)
class TuneStep:
    """Layers trained together for a number of epochs (``lm_head`` is always added)."""

    groups: tuple[str, ...]
    layers: tuple[int, ...]
    epochs: int

    @property
    def param_groups(self) -> list[str]:
        return [layer_group(i) for i in self.layers] + [LM_HEAD]


@dataclass(frozen=True)
class TuneSchedule:
    name: str
    steps: tuple[TuneStep, ...]
    total_epochs: int

    @property
    def slug(self) -> str:
        return config_slug(self.name)


def plan_schedule(config_name: str, plan: LayerGroupPlan, total_epochs: int) -> TuneSchedule:
    """Build the training steps of one named configuration.

    Single-step configurations train the union of their groups for all
    epochs; two-step configurations train each group for half the epochs in
    arrow order.

    Raises:
        ConfigError: On an unknown name, negative epochs, or an odd total for a two-step name.

    """
    name = canonical_config_name(config_name)
    if total_epochs < 0:
        raise ConfigError(f"total_epochs must be >= 0, got {total_epochs}")

    def step(groups: tuple[str, ...], epochs: int) -> TuneStep:
        layers = tuple(layer for g in groups for layer in plan.layers(g))
        return TuneStep(groups=groups, layers=tuple(sorted(layers)), epochs=epochs)

    if name in _SINGLE_STEP:
        steps: tuple[TuneStep, ...] = (step(_SINGLE_STEP[name], total_epochs),)
    else:
        if total_epochs % 2:
            raise ConfigError(
                f"two-step configuration {name} needs an even total, got {total_epochs}"
            )
        first, second = _TWO_STEP[name]
        half = total_epochs // 2
        steps = (step((first,), half), step((second,), half))
    return TuneSchedule(name=name, steps=steps, total_epochs=total_epochs)


# ---------------------------------------------------------------------------
# Budget
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EffectiveBudget:
    value: float


def budget_from_counts(
    sched: TuneSchedule, layer_counts: Sequence[int], head_count: int
) -> float:
    """``100 * sum(step params * step epochs) / (scope params * total epochs)``.

    The scope is every transformer layer plus ``lm_head``; each step trains
    its layers and ``lm_head``. A zero-epoch schedule has budget 0.
    """
    scope = sum(layer_counts) + head_count
    if sched.total_epochs == 0 or scope == 0:
        return 0.0
    used = sum(
        (sum(layer_counts[i] for i in step.layers) + head_count) * step.epochs
        for step in sched.steps
    )
    return 100 * used / (scope * sched.total_epochs)


def effective_budget(sched: TuneSchedule, model: Model) -> EffectiveBudget:
    """Effective trainable budget of ``sched`` for ``model`` (All over all epochs = 100)."""
    counts = group_parameter_counts(model)
    layer_counts = [counts[layer_group(i)] for i in range(model.cfg.n_layers)]
    return EffectiveBudget(budget_from_counts(sched, layer_counts, counts[LM_HEAD]))


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneSettings:
    lr: float = 1e-4
    batch_size: int = 256
    schedule: ScheduleKind = ScheduleKind.COSINE
    weight_decay: float = 0.0
    clip_norm: float | None = None
    seed: int = 0


@dataclass
class FinetuneResult:
    """Tuned model copy plus per-step training records."""

    model: Model
    schedule: TuneSchedule
    step_seconds: list[float] = field(default_factory=list)
    step_logs: list[list[EpochLog]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return sum(log.steps for logs in self.step_logs for log in logs)

    @property
    def final_loss(self) -> float | None:
        for logs in reversed(self.step_logs):
            if logs:
                return logs[-1].mean_loss
        return None

    def to_dict(self, task: str, budget: float) -> FinetuneRunDict:
        return FinetuneRunDict(
            config=self.schedule.name,
            task=task,
            budget=budget,
            total_epochs=self.schedule.total_epochs,
            step_epochs=[s.epochs for s in self.schedule.steps],
            step_layers=[list(s.layers) for s in self.schedule.steps],
            final_loss=self.final_loss,
        )


def run_finetune(
    model: Model,
    ds: Any,
    sched: TuneSchedule,
    hyper: FinetuneSettings | None = None,
    on_step: Callable[[int, Model], None] | None = None,
) -> FinetuneResult:
    """Run every step of ``sched`` on a copy of ``model``.

    Each step makes its layers plus ``lm_head`` trainable, restarts the
    learning-rate schedule and a fresh Adam state, and records its wall-clock.
    ``on_step(index, tuned)`` runs after each finished step. The input model
    is not modified.

    Raises:
        ConfigError: If the schedule names layers the model does not have.
        NumericError: If the loss becomes non-finite; the message names the step.

    """
    hyper = hyper or FinetuneSettings()
    if any(layer >= model.cfg.n_layers for s in sched.steps for layer in s.layers):
        raise ConfigError(f"{sched.name} names layers beyond the model's {model.cfg.n_layers}")

    tuned = model.clone()
    result = FinetuneResult(model=tuned, schedule=sched)
    examples = examples_from_dataset(ds) if any(s.epochs for s in sched.steps) else []
    for index, step in enumerate(sched.steps):
        set_trainable(tuned, step.param_groups, finetune_policy=True)
        settings = TrainSettings(
            lr=hyper.lr,
            batch_size=hyper.batch_size,
            epochs=step.epochs,
            schedule=hyper.schedule,
            weight_decay=hyper.weight_decay,
            clip_norm=hyper.clip_norm,
            seed=derive_seed(hyper.seed, sched.name, index),
        )
        started = time.perf_counter()
        try:
            logs = train_answer_span(tuned, examples, settings)
        except NumericError as e:
            logger.error("❌ %s step %d (%s) diverged: %s", sched.name, index, step.groups, e)
            raise NumericError(f"{sched.name} step {index} {list(step.groups)}: {e}") from e
        elapsed = time.perf_counter() - started
        record_finetune_step(sched.slug, elapsed)
        result.step_seconds.append(elapsed)
        result.step_logs.append(logs)
        logger.info(
            "✅ %s step %d/%d (%s, %d epochs) took %.1fs",
            sched.name,
            index + 1,
            len(sched.steps),
            "+".join(step.groups),
            step.epochs,
            elapsed,
        )
        if on_step is not None:
            on_step(index, tuned)
    return result

"""Experiment configuration.

An :class:`ExperimentConfig` is a tree of frozen dataclasses loaded from one
human-editable JSON document. Every field has a default, unknown keys are
rejected, and :meth:`ExperimentConfig.to_dict` round-trips through
:func:`config_from_dict`. Precedence is CLI flags, then the JSON document,
then the environment getters in :mod:`app.config_shared`, then the
dataclass defaults.
"""

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Any

from app import config_shared
from app.finetune import (
    CONFIG_NAMES,
    TWO_STEP_CONFIGS,
    FinetuneSettings,
    canonical_config_name,
)
from app.model import ModelConfig
from app.probing import ProbeSettings
from app.training import TrainSettings
from app.utils.errors import ConfigError
from app.utils.setup_logger import setup_logger
from app.utils.types import BINARY_TASKS, NegativeSource, Precision, ScheduleKind, TaskKind
from app.utils.validate_data import (
    ensure_valid,
    validate_band,
    validate_positive_float,
    validate_positive_int,
)

logger = setup_logger(__name__)


def _enum(enum_cls: type[Enum], value: Any, where: str) -> Any:
    try:
        return enum_cls(value)
    except ValueError:
        allowed = [m.value for m in enum_cls]  # type: ignore[attr-defined]
        raise ConfigError(f"{where}: {value!r} is not one of {allowed}") from None


@dataclass(frozen=True)
class TaskSizes:
    """Train/test sample counts of one task."""

    kind: TaskKind
    train: int = 8000
    test: int = 1000

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", _enum(TaskKind, self.kind, "tasks.kind"))
        for split in ("train", "test"):
            ensure_valid(
                validate_positive_int(f"tasks.{self.kind.value}.{split}", getattr(self, split), 2),
                f"{self.kind.value}: {split} needs at least 2 samples to balance labels",
            )


def _default_tasks() -> tuple[TaskSizes, ...]:
    binary = tuple(TaskSizes(kind) for kind in BINARY_TASKS)
    return (*binary, TaskSizes(TaskKind.DOC_QA, train=2000, test=200))


@dataclass(frozen=True)
class OptimSection:
    """Learning rate, batch size and epochs of one training recipe."""

    lr: float
    batch_size: int
    epochs: int
    schedule: ScheduleKind = ScheduleKind.COSINE
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "schedule", _enum(ScheduleKind, self.schedule, "schedule"))
        ensure_valid(validate_positive_float("lr", self.lr), f"lr must be positive: {self.lr}")
        ensure_valid(
            validate_positive_int("batch_size", self.batch_size),
            f"batch_size must be >= 1: {self.batch_size}",
        )
        ensure_valid(
            validate_positive_int("epochs", self.epochs, minimum=0),
            f"epochs must be >= 0: {self.epochs}",
        )
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def _probe_default() -> OptimSection:
    defaults = ProbeSettings()
    return OptimSection(lr=defaults.lr, batch_size=defaults.batch_size, epochs=defaults.epochs)


_CLASSIFICATION_DEFAULT = OptimSection(lr=1e-4, batch_size=256, epochs=10)
_DOC_QA_DEFAULT = OptimSection(lr=3e-4, batch_size=64, epochs=2)


@dataclass(frozen=True)
class BaseTrainSection:
    """Joint base training until every binary task answers inside the accuracy band."""

    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 8
    samples_per_task: int = 1000
    eval_samples: int = 200
    band_low: float = 0.60
    band_high: float = 0.85
    include_doc_qa: bool = True

    def __post_init__(self) -> None:
        ensure_valid(validate_positive_float("base.lr", self.lr), f"base.lr: {self.lr}")
        for name in ("batch_size", "max_epochs", "samples_per_task", "eval_samples"):
            ensure_valid(
                validate_positive_int(f"base.{name}", getattr(self, name)),
                f"base.{name} must be a positive integer",
            )
        ensure_valid(
            validate_band(self.band_low, self.band_high),
            f"base band [{self.band_low}, {self.band_high}] is invalid",
        )

    def settings(self, seed: int) -> TrainSettings:
        return TrainSettings(
            lr=self.lr, batch_size=self.batch_size, epochs=self.max_epochs, seed=seed
        )


@dataclass(frozen=True)
class FinetuneSection:
    """Which configurations to run on which tasks, and their recipes."""

    configs: tuple[str, ...] = CONFIG_NAMES
    tasks: tuple[TaskKind, ...] = (*BINARY_TASKS, TaskKind.DOC_QA)
    train_samples: int = 1024
    probe_train_samples: int = 2000
    classification: OptimSection = field(default_factory=lambda: _CLASSIFICATION_DEFAULT)
    doc_qa: OptimSection = field(default_factory=lambda: _DOC_QA_DEFAULT)
    boundaries: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "configs", tuple(canonical_config_name(c) for c in _as_list(self.configs))
        )
        object.__setattr__(
            self,
            "tasks",
            tuple(_enum(TaskKind, t, "finetune.tasks") for t in _as_list(self.tasks)),
        )
        recipes = (("classification", _CLASSIFICATION_DEFAULT), ("doc_qa", _DOC_QA_DEFAULT))
        for name, default in recipes:
            value = getattr(self, name)
            if isinstance(value, Mapping):
                recipe = _section(OptimSection, value, default, f"finetune.{name}")
                object.__setattr__(self, name, recipe)
        if self.boundaries is not None:
            pair = tuple(_as_list(self.boundaries))
            if len(pair) != 2 or not all(validate_positive_int("boundary", b) for b in pair):
                raise ConfigError(f"finetune.boundaries must be two layer indices, got {pair}")
            object.__setattr__(self, "boundaries", pair)
        for name in ("train_samples", "probe_train_samples"):
            ensure_valid(
                validate_positive_int(f"finetune.{name}", getattr(self, name), 2),
                f"finetune.{name} must be >= 2",
            )
        two_step = any(c in TWO_STEP_CONFIGS for c in self.configs)
        for recipe in (self.classification, self.doc_qa):
            if two_step and recipe.epochs % 2:
                raise ConfigError(f"two-step configurations need an even epoch total: {recipe}")

    def recipe(self, kind: TaskKind) -> OptimSection:
        return self.classification if kind.is_binary else self.doc_qa

    def settings(self, kind: TaskKind, seed: int) -> FinetuneSettings:
        recipe = self.recipe(kind)
        return FinetuneSettings(
            lr=recipe.lr,
            batch_size=recipe.batch_size,
            schedule=recipe.schedule,
            weight_decay=recipe.weight_decay,
            seed=seed,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; written to ``<out_dir>/config.json``."""

    seed: int = 0
    precision: Precision = Precision.F64
    out_dir: str = "runs/default"
    workers: int = 1
    eval_batch_size: int = 32
    filter_hard: bool = False
    hard_negatives: NegativeSource = NegativeSource.PERTURBED
    model: ModelConfig = field(default_factory=ModelConfig)
    tasks: tuple[TaskSizes, ...] = field(default_factory=_default_tasks)
    probe: OptimSection = field(default_factory=_probe_default)
    base: BaseTrainSection = field(default_factory=BaseTrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)

    def __post_init__(self) -> None:
        object.__setattr__(self, "precision", _enum(Precision, self.precision, "precision"))
        object.__setattr__(
            self, "hard_negatives", _enum(NegativeSource, self.hard_negatives, "hard_negatives")
        )
        ensure_valid(validate_positive_int("seed", self.seed, 0), f"seed must be >= 0: {self.seed}")
        ensure_valid(validate_positive_int("workers", self.workers), "workers must be >= 1")
        ensure_valid(
            validate_positive_int("eval_batch_size", self.eval_batch_size),
            "eval_batch_size must be >= 1",
        )
        kinds = [t.kind for t in self.tasks]
        if len(set(kinds)) != len(kinds):
            raise ConfigError(f"tasks list a kind twice: {[k.value for k in kinds]}")
        missing = [k.value for k in self.finetune.tasks if k not in kinds]
        if missing:
            raise ConfigError(f"finetune.tasks not generated by tasks: {missing}")
        for sizes in self.tasks:
            if sizes.kind.is_binary and sizes.train < self.base.samples_per_task:
                raise ConfigError(
                    f"{sizes.kind.value}: train size {sizes.train} is below "
                    f"base.samples_per_task {self.base.samples_per_task}"
                )
        if self.finetune.boundaries is not None:
            l1, l2 = self.finetune.boundaries
            if not 0 < l1 < l2 < self.model.n_layers:
                raise ConfigError(
                    f"boundaries must satisfy 0 < l1 < l2 < {self.model.n_layers}, got {l1}, {l2}"
                )

    @property
    def binary_tasks(self) -> list[TaskSizes]:
        return [t for t in self.tasks if t.kind.is_binary]

    def sizes(self, kind: TaskKind) -> TaskSizes:
        for sizes in self.tasks:
            if sizes.kind is kind:
                return sizes
        raise ConfigError(f"task {kind.value} is not configured")

    def probe_settings(self) -> ProbeSettings:
        return ProbeSettings(
            lr=self.probe.lr,
            batch_size=self.probe.batch_size,
            epochs=self.probe.epochs,
            weight_decay=self.probe.weight_decay,
            schedule=self.probe.schedule,
        )

    def to_dict(self) -> dict[str, Any]:
        return _plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def with_overrides(
        self,
        seed: int | None = None,
        out_dir: str | None = None,
        precision: str | None = None,
        workers: int | None = None,
        boundaries: Sequence[int] | None = None,
        configs: Sequence[str] | None = None,
    ) -> "ExperimentConfig":
        """Apply command-line flags; ``None`` leaves a field unchanged."""
        top: dict[str, Any] = {}
        if seed is not None:
            top["seed"] = seed
        if out_dir is not None:
            top["out_dir"] = out_dir
        if precision is not None:
            top["precision"] = precision
        if workers is not None:
            top["workers"] = workers
        tune: dict[str, Any] = {}
        if boundaries is not None:
            tune["boundaries"] = tuple(boundaries)
        if configs is not None:
            tune["configs"] = tuple(configs)
        if tune:
            top["finetune"] = replace(self.finetune, **tune)
        return replace(self, **top) if top else self


def _as_list(value: Any) -> list[Any]:
    if isinstance(value, str) or not isinstance(value, Sequence):
        raise ConfigError(f"expected a list, got {value!r}")
    return list(value)


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, ModelConfig):
        return value.to_dict()
    if hasattr(value, "__dataclass_fields__"):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    return value


def _section(cls: type, data: Any, base: Any, where: str) -> Any:
    """Build ``cls`` from a mapping, taking absent fields from ``base`` (or the defaults)."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where} must be an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown {where} fields: {sorted(unknown)}")
    try:
        if base is None:
            return cls(**dict(data))
        return replace(base, **dict(data))
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def env_defaults() -> ExperimentConfig:
    """Dataclass defaults with the process-level environment settings applied."""
    return ExperimentConfig(
        precision=config_shared.get_precision(),
        out_dir=config_shared.get_default_out_dir(),
        workers=config_shared.get_workers(),
    )


def config_from_dict(
    data: Mapping[str, Any], base: ExperimentConfig | None = None
) -> ExperimentConfig:
    """Build a config from a parsed JSON document.

    Raises:
        ConfigError: On unknown keys or invalid values.

    """
    base = base or ExperimentConfig()
    if not isinstance(data, Mapping):
        raise ConfigError("experiment config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown experiment config fields: {sorted(unknown)}")

    values: dict[str, Any] = {}
    for key, raw in data.items():
        if key == "model":
            if not isinstance(raw, Mapping):
                raise ConfigError("model must be an object")
            values[key] = ModelConfig.from_dict({**base.model.to_dict(), **raw})
        elif key == "tasks":
            values[key] = tuple(_section(TaskSizes, t, None, "tasks[]") for t in _as_list(raw))
        elif key == "probe":
            values[key] = _section(OptimSection, raw, base.probe, "probe")
        elif key == "base":
            values[key] = _section(BaseTrainSection, raw, base.base, "base")
        elif key == "finetune":
            values[key] = _section(FinetuneSection, raw, base.finetune, "finetune")
        else:
            values[key] = raw
    try:
        return replace(base, **values)
    except TypeError as e:
        raise ConfigError(f"experiment config: {e}") from e


def load_config(path: str | None = None) -> ExperimentConfig:
    """Load the JSON document at ``path`` over the environment defaults.

    Raises:
        ConfigError: If the file is not valid JSON or holds invalid settings.

    """
    base = env_defaults()
    if path is None:
        return base
    with open(path, encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
    config = config_from_dict(data, base)
    logger.info("✅ Loaded experiment config from %s", path)
    return config

"""Next-token training on answer spans.

Both base-model training and layer-group fine-tuning teach the model to
continue ``[image][BOS][prompt]`` with ``answer`` followed by EOS. The loss
is cross-entropy over those answer positions only. Only parameters with
``requires_grad`` set are updated; everything else is left untouched.
"""

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from app import tokenizer
from app.model import Model, forward_batch
from app.optim import AdamState, LrSchedule, adam_step, clip_grad_norm, scheduled_lr
from app.response_eval import format_open_prompt, format_prompt
from app.tensor import Tape, Tensor, backward, softmax_cross_entropy
from app.utils.errors import ContractError, NumericError
from app.utils.setup_logger import setup_logger
from app.utils.types import ScheduleKind

logger = setup_logger(__name__)


@dataclass(frozen=True)
class AnswerExample:
    """One training pair: prompt ids, answer ids (without EOS) and the image in [0, 1]."""

    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    image: np.ndarray


@dataclass(frozen=True)
class TrainSettings:
    """Optimizer settings for one training call."""

    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    schedule: ScheduleKind = ScheduleKind.COSINE
    weight_decay: float = 0.0
    clip_norm: float | None = None
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    steps: int


EpochCallback = Callable[[EpochLog], bool]


def examples_from_dataset(ds: Any) -> list[AnswerExample]:
    """Generative training pairs: templated prompt -> "1"/"0", or question -> gold word."""
    examples = []
    for sample in ds.samples:
        if sample.kind.is_binary:
            prompt = format_prompt(sample.question)
        else:
            prompt = format_open_prompt(sample.question)
        examples.append(
            AnswerExample(
                prompt=tuple(tokenizer.encode(prompt)),
                answer=tuple(tokenizer.encode(sample.answer)),
                image=sample.grid,
            )
        )
    return examples


def answer_loss(model: Model, batch: Sequence[AnswerExample]) -> Tensor:
    """Masked next-token cross-entropy over the answer span of each example."""
    sequences = [list(ex.prompt) + list(ex.answer) for ex in batch]
    images = np.stack([ex.image for ex in batch])
    out = forward_batch(model, sequences, images)
    shape = out.logits.shape[:2]
    targets = np.zeros(shape, dtype=np.int64)
    mask = np.zeros(shape)
    for row, ex in enumerate(batch):
        # the last prompt character predicts the first answer token
        start = out.layouts[row].text_span[0] + len(ex.prompt)
        span = [*ex.answer, tokenizer.EOS]
        targets[row, start : start + len(span)] = span
        mask[row, start : start + len(span)] = 1.0
    return softmax_cross_entropy(out.logits, targets, mask)


def train_answer_span(
    model: Model,
    examples: Sequence[AnswerExample],
    settings: TrainSettings,
    on_epoch: EpochCallback | None = None,
) -> list[EpochLog]:
    """Train the trainable parameters of ``model`` in place.

    The learning rate follows ``settings.schedule`` over all optimizer steps of
    this call; a fresh Adam state is created per call.

    Args:
        model (Model): Model to update; its trainable flags select the parameters.
        examples (Sequence[AnswerExample]): Training pairs.
        settings (TrainSettings): Optimizer settings.
        on_epoch (EpochCallback | None): Called after every epoch; returning True stops training.

    Returns:
        list[EpochLog]: One entry per completed epoch.

    Raises:
        ContractError: If there are no examples or the batch size is not positive.
        NumericError: If a loss becomes non-finite.

    """
    trainable = [name for name, p in model.params.items() if p.requires_grad]
    if settings.epochs == 0 or not trainable:
        return []
    if not examples:
        raise ContractError("training needs at least one example")
    if settings.batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {settings.batch_size}")

    n = len(examples)
    steps_per_epoch = math.ceil(n / settings.batch_size)
    sched = LrSchedule(settings.lr, steps_per_epoch * settings.epochs, settings.schedule)
    states = {name: AdamState.zeros_like(model[name]) for name in trainable}
    rng = np.random.default_rng(settings.seed)

    logs: list[EpochLog] = []
    step = 0
    for epoch in range(settings.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, settings.batch_size):
            batch = [examples[i] for i in order[start : start + settings.batch_size]]
            with Tape() as tape:
                loss = answer_loss(model, batch)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            backward(tape, loss)

            grads = {name: model[name].grad for name in trainable}
            grads, _ = clip_grad_norm(grads, settings.clip_norm)
            lr = scheduled_lr(step, sched)
            for name in trainable:
                model.params[name], states[name] = adam_step(
                    model[name], grads[name], states[name], lr, settings.weight_decay
                )
            losses.append(value)
            step += 1

        log = EpochLog(epoch=epoch, mean_loss=float(np.mean(losses)), steps=len(losses))
        logs.append(log)
        logger.info("📊 Epoch %d: mean loss %.4f over %d steps", epoch, log.mean_loss, log.steps)
        if on_epoch is not None and on_epoch(log):
            break
    return logs

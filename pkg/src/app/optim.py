"""Initializers, Adam and learning-rate schedules."""

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from app.tensor import Tensor, get_default_dtype
from app.utils.errors import ContractError, DimensionError, NumericError
from app.utils.types import ScheduleKind


def derive_seed(seed: int, *labels: object) -> int:
    """Derive an independent child seed from a root seed and a label path.

    Args:
        seed (int): Root seed.
        *labels (object): Path components, e.g. ``("layer", 3, "wq")``.

    Returns:
        int: A 60-bit seed that is stable across processes and platforms.

    """
    key = ":".join([str(int(seed)), *(str(label) for label in labels)])
    return int(hashlib.sha256(key.encode("utf-8")).hexdigest()[:15], 16)


def xavier_uniform(shape: tuple[int, ...] | list[int], seed: int, dtype: Any = None) -> Tensor:
    """Sample a weight tensor from U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    ``fan_in`` is the last extent and ``fan_out`` the first, which matches the
    (out, in) storage of every weight matrix in the model.

    Raises:
        ContractError: If the shape has fewer than two extents or a non-positive extent.

    """
    dims = tuple(int(s) for s in shape)
    if len(dims) < 2:
        raise ContractError(f"xavier_uniform needs at least 2 extents, got {dims}")
    if any(s <= 0 for s in dims):
        raise ContractError(f"xavier_uniform extents must be positive, got {dims}")
    bound = math.sqrt(6.0 / (dims[-1] + dims[0]))
    values = np.random.default_rng(seed).uniform(-bound, bound, size=dims)
    return Tensor(values, requires_grad=True, dtype=dtype or get_default_dtype())


def zeros(shape: tuple[int, ...] | list[int], dtype: Any = None) -> Tensor:
    """Zero-initialized trainable tensor (biases, layernorm shifts)."""
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype or get_default_dtype())


def ones(shape: tuple[int, ...] | list[int], dtype: Any = None) -> Tensor:
    """One-initialized trainable tensor (layernorm gains)."""
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype or get_default_dtype())


@dataclass(frozen=True)
class AdamState:
    """First/second moment estimates and step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: Tensor) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data))


def adam_step(
    param: Tensor,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> tuple[Tensor, AdamState]:
    """Apply one bias-corrected Adam update.

    Args:
        param (Tensor): Current parameter value.
        grad (np.ndarray): Gradient with the parameter's shape.
        state (AdamState): Moments from the previous step.
        lr (float): Step size, must be >= 0.
        weight_decay (float): L2 coefficient added to the gradient (0 disables).

    Returns:
        tuple[Tensor, AdamState]: The new parameter and the advanced state.

    Raises:
        DimensionError: If grad or state shapes differ from the parameter.
        ContractError: If lr is negative.
        NumericError: If the gradient has non-finite entries; nothing is updated.

    """
    g = np.asarray(grad, dtype=param.dtype)
    if g.shape != param.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise DimensionError(
            f"adam_step shape mismatch: param {param.shape}, grad {g.shape}, state {state.m.shape}"
        )
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient for parameter {param.name or param.id}")

    if weight_decay:
        g = g + weight_decay * param.data
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    updated = param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)

    new_param = Tensor(
        updated, requires_grad=param.requires_grad, name=param.name, dtype=param.dtype
    )
    return new_param, replace(state, m=m, v=v, t=t)


@dataclass(frozen=True)
class LrSchedule:
    """Learning-rate schedule over a fixed number of optimizer steps."""

    lr0: float
    total_steps: int
    kind: ScheduleKind = ScheduleKind.COSINE

    def __post_init__(self) -> None:
        if not self.lr0 > 0:
            raise ContractError(f"lr0 must be positive, got {self.lr0}")
        if self.total_steps < 1:
            raise ContractError(f"total_steps must be >= 1, got {self.total_steps}")
        object.__setattr__(self, "kind", ScheduleKind(self.kind))


def _check_step(step: int, sched: LrSchedule) -> None:
    if not 0 <= step <= sched.total_steps:
        raise ContractError(f"step {step} outside [0, {sched.total_steps}]")


def cosine_lr(step: int, sched: LrSchedule) -> float:
    """Cosine-annealed learning rate, floored at 0.

    Raises:
        ContractError: If ``step`` lies outside ``[0, total_steps]``.

    """
    _check_step(step, sched)
    value = sched.lr0 * (1.0 + math.cos(math.pi * step / sched.total_steps)) / 2.0
    return max(value, 0.0)


def scheduled_lr(step: int, sched: LrSchedule) -> float:
    """Learning rate at ``step`` for either schedule kind."""
    if sched.kind is ScheduleKind.COSINE:
        return cosine_lr(step, sched)
    _check_step(step, sched)
    return sched.lr0


def clip_grad_norm(
    grads: dict[str, np.ndarray], max_norm: float | None
) -> tuple[dict[str, np.ndarray], float]:
    """Rescale a gradient set so its global L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    ``max_norm=None`` only measures.
    """
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm

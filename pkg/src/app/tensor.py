"""Dense tensors with a reverse-mode gradient tape.

Tensors wrap read-only numpy arrays. Operations always compute eagerly; while a
``Tape`` is active on the current thread and at least one input is tracked,
the operation also records a node holding the closure that maps the output
gradient back to its inputs. ``backward`` replays those nodes in reverse.

The op set is deliberately small: matmul, add (with bias broadcast), mul,
transpose, embedding lookup, layernorm, GELU, causal softmax-attention,
softmax cross-entropy and sum/mean reductions.
"""

import itertools
import math
import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import erf, log_softmax
from scipy.special import softmax as _scipy_softmax

from app.utils.errors import ContractError, DimensionError
from app.utils.types import Precision

_DTYPES: dict[Precision, type[np.floating[Any]]] = {
    Precision.F32: np.float32,
    Precision.F64: np.float64,
}

_default_dtype: type[np.floating[Any]] = np.float64
_ids = itertools.count(1)
_local = threading.local()

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def set_default_dtype(precision: Precision | str) -> None:
    """Select the floating point width used for newly created tensors."""
    global _default_dtype
    _default_dtype = _DTYPES[Precision(precision)]


def get_default_dtype() -> type[np.floating[Any]]:
    """Return the numpy dtype used for newly created tensors."""
    return _default_dtype


class Tensor:
    """Immutable n-dimensional value that may take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "id", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: Any = None,
    ) -> None:
        """Copy ``data`` into a read-only float array.

        Raises:
            ContractError: If any extent of the shape is not positive.

        """
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _default_dtype
        arr = np.array(arr, dtype=dtype, copy=True)
        if any(extent <= 0 for extent in arr.shape):
            raise ContractError(f"Tensor extents must be positive, got shape {arr.shape}")
        self._init(arr, requires_grad, name)

    def _init(self, arr: np.ndarray, requires_grad: bool, name: str | None) -> None:
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.id: int = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out._init(np.require(arr, requirements="C"), False, None)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.data.dtype

    def item(self) -> float:
        """Return the value of a single-element tensor as a Python float."""
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return the underlying read-only array."""
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class TapeNode:
    """One recorded operation: kind, inputs, output id and its backward closure."""

    op: str
    inputs: tuple[Tensor, ...]
    output_id: int
    backward: BackwardFn

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.inputs)


class Tape:
    """Ordered record of differentiable operations.

    Usage::

        with Tape() as tape:
            loss = reduce_sum(mul(x, x))
        grads = backward(tape, loss)
    """

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self._tracked: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _tape_stack().pop()

    @property
    def leaves(self) -> list[Tensor]:
        """Tensors with ``requires_grad`` that reached a recorded op."""
        return list(self._leaves.values())

    def record(
        self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn
    ) -> None:
        tracked = False
        for t in inputs:
            if t.requires_grad and t.id not in self._tracked:
                self._tracked.add(t.id)
                self._leaves[t.id] = t
            tracked = tracked or t.id in self._tracked
        if not tracked:
            return
        self._tracked.add(output.id)
        output.requires_grad = True
        self.nodes.append(TapeNode(op, tuple(inputs), output.id, backward_fn))

    def produced(self, tensor: Tensor) -> bool:
        return tensor.id in self._tracked


def _tape_stack() -> list[Tape]:
    stack: list[Tape] | None = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    result = Tensor._wrap(out)
    stack = _tape_stack()
    if stack:
        stack[-1].record(op, inputs, result, backward_fn)
    return result


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(leaf) to every tracked leaf of ``tape``.

    Gradients from several consumers of one tensor are summed. Each leaf's
    ``grad`` is overwritten with the result; leaves that the loss does not
    depend on receive zeros.

    Returns:
        dict[int, np.ndarray]: Gradient per leaf tensor id.

    Raises:
        ContractError: If ``loss`` is not a scalar produced on this tape.

    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        for tensor, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not tape.produced(tensor):
                continue
            prev = grads.get(tensor.id)
            grads[tensor.id] = gi if prev is None else prev + gi

    result: dict[int, np.ndarray] = {}
    for leaf_id, leaf in tape._leaves.items():
        g = grads.get(leaf_id)
        leaf.grad = (
            np.zeros_like(leaf.data)
            if g is None
            else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        )
        result[leaf_id] = leaf.grad
    return result


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Multiply ``a[..., k]`` by the matrix ``b[k, n]``.

    Raises:
        DimensionError: If ``b`` is not a matrix or the inner extents differ.

    """
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    k, n = b.shape
    a_data, b_data = a.data, b.data

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ b_data.T
        gb = a_data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _emit("matmul", (a, b), a_data @ b_data, _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector matching ``a``'s last extent."""
    if a.shape == b.shape:

        def _same(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return g, g

        return _emit("add", (a, b), a.data + b.data, _same)

    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]

        def _bias(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return g, g.reshape(-1, n).sum(axis=0)

        return _emit("add", (a, b), a.data + b.data, _bias)

    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    a_data, b_data = a.data, b.data

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g * b_data, g * a_data

    return _emit("mul", (a, b), a_data * b_data, _backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got shape {a.shape}")

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.swapaxes(g, -1, -2),)

    return _emit("transpose", (a,), np.swapaxes(a.data, -1, -2), _backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``weight`` for an integer id array of any shape."""
    if weight.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got shape {weight.shape}")
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError(f"embedding ids must be integers, got {idx.dtype}")
    rows, width = weight.shape
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise ContractError(f"embedding id out of range [0, {rows})")

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, width))
        return (gw,)

    return _emit("embedding", (weight,), weight.data[idx], _backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm parameter mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gamma_data = gamma.data

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_gamma = (g * xhat).reshape(-1, d).sum(axis=0)
        g_beta = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gamma_data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, g_gamma, g_beta

    return _emit("layernorm", (x, gamma, beta), xhat * gamma_data + beta.data, _backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    x_data = x.data

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        pdf = np.exp(-0.5 * x_data * x_data) * _INV_SQRT_2PI
        return (g * (cdf + x_data * pdf),)

    return _emit("gelu", (x,), x_data * cdf, _backward)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a causal mask.

    Inputs are ``[B, T, D]`` (or ``[T, D]``) projections; position ``t`` only
    attends to positions ``<= t``.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim not in (2, 3):
        raise DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if q.shape[-1] % n_heads:
        raise DimensionError(f"width {q.shape[-1]} is not divisible by {n_heads} heads")

    squeeze = q.ndim == 2
    shape3 = (1, *q.shape) if squeeze else q.shape
    batch, steps, width = shape3
    head = width // n_heads
    scale = 1.0 / math.sqrt(head)

    def split(arr: np.ndarray) -> np.ndarray:
        return arr.reshape(batch, steps, n_heads, head).transpose(0, 2, 1, 3)

    def merge(arr: np.ndarray) -> np.ndarray:
        return arr.transpose(0, 2, 1, 3).reshape(q.shape)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores[:, :, np.triu(np.ones((steps, steps), dtype=bool), k=1)] = -np.inf
    probs = _scipy_softmax(scores, axis=-1)
    out = merge(probs @ vh)

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gh = split(g)
        d_probs = gh @ vh.transpose(0, 1, 3, 2)
        d_v = probs.transpose(0, 1, 3, 2) @ gh
        d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
        d_q = (d_scores @ kh) * scale
        d_k = (d_scores.transpose(0, 1, 3, 2) @ qh) * scale
        return merge(d_q), merge(d_k), merge(d_v)

    return _emit("causal_attention", (q, k, v), out, _backward)


def softmax_cross_entropy(
    logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None
) -> Tensor:
    """Mean cross-entropy of ``logits[..., C]`` against integer ``targets[...]``.

    ``mask`` weights each position (0 excludes it); the mean runs over the
    total weight.

    Raises:
        DimensionError: If targets or mask do not match the logits' leading shape.
        ContractError: If a target is out of range or the mask selects nothing.

    """
    classes = logits.shape[-1]
    flat = logits.data.reshape(-1, classes)
    tgt = np.asarray(targets).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError(f"targets {np.shape(targets)} do not match logits {logits.shape}")
    weights = (
        np.ones(flat.shape[0], dtype=flat.dtype)
        if mask is None
        else np.asarray(mask, dtype=flat.dtype).reshape(-1)
    )
    if weights.shape[0] != flat.shape[0]:
        raise DimensionError(f"mask {np.shape(mask)} does not match logits {logits.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= classes):
        raise ContractError(f"target id out of range [0, {classes})")
    total = float(weights.sum())
    if total <= 0.0:
        raise ContractError("cross-entropy mask selects no positions")

    logp = log_softmax(flat, axis=-1)
    rows = np.arange(flat.shape[0])
    loss = -(weights * logp[rows, tgt]).sum() / total

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.exp(logp)
        grad[rows, tgt] -= 1.0
        grad *= (weights / total)[:, None]
        return ((g * grad).reshape(logits.shape),)

    return _emit("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=flat.dtype), _backward)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over everything when ``axis`` is None."""
    shape = x.shape

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        expanded = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, shape).copy(),)

    return _emit("sum", (x,), np.asarray(x.data.sum(axis=axis)), _backward)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean over one axis, or over everything when ``axis`` is None."""
    shape = x.shape
    count = x.data.size if axis is None else shape[axis]

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        expanded = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded / count, shape).copy(),)

    return _emit("mean", (x,), np.asarray(x.data.mean(axis=axis)), _backward)


def softmax(x: np.ndarray | Tensor, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax over ``axis`` (no gradient is recorded)."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.asarray(_scipy_softmax(data, axis=axis))

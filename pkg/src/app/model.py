"""Toy vision-language transformer.

A 32x32 RGB image is cut into 4x4 patches; each patch is linearly projected
into the model width and summed with the ``IMG`` marker embedding and a
learned position. The image tokens are followed by ``BOS`` and the prompt
characters, and the whole sequence runs through pre-norm decoder blocks
(causal multi-head attention + GELU MLP). The output of every block is kept
so probes can read it.

Parameters are stored as (out, in) matrices in a flat, ordered mapping and
belong to one of these groups: ``projector``, ``embeddings``, ``layer.<i>``
and ``lm_head`` (final norm plus output projection).
"""

import json
import struct
import threading
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from app import tokenizer
from app.optim import derive_seed, ones, xavier_uniform, zeros
from app.tensor import (
    Tensor,
    add,
    causal_attention,
    embedding,
    gelu,
    get_default_dtype,
    layernorm,
    matmul,
    transpose,
)
from app.utils.errors import (
    ConfigError,
    ContractError,
    DatasetFormatError,
    DimensionError,
    LengthError,
)
from app.utils.metrics import record_forward
from app.utils.setup_logger import setup_logger

logger = setup_logger(__name__)

CHECKPOINT_MAGIC = b"PLAB"
CHECKPOINT_VERSION = 1

PROJECTOR = "projector"
EMBEDDINGS = "embeddings"
LM_HEAD = "lm_head"


def layer_group(index: int) -> str:
    """Name of the parameter group holding transformer block ``index``."""
    return f"layer.{index}"


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the toy model."""

    d_model: int = 64
    n_layers: int = 12
    n_heads: int = 4
    vocab_size: int = tokenizer.VOCAB_SIZE
    patch_px: int = 4
    image_px: int = 32
    max_seq: int = 256
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        for name, value in self.to_dict().items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"ModelConfig.{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.image_px % self.patch_px:
            raise ConfigError(
                f"image_px {self.image_px} is not divisible by patch_px {self.patch_px}"
            )
        if self.n_layers < 3:
            raise ConfigError(f"n_layers must be >= 3 for three layer groups, got {self.n_layers}")
        if self.vocab_size < tokenizer.VOCAB_SIZE:
            raise ConfigError(
                f"vocab_size {self.vocab_size} is below the tokenizer size {tokenizer.VOCAB_SIZE}"
            )
        if self.max_seq <= self.n_patches + 1:
            raise ConfigError(
                f"max_seq {self.max_seq} leaves no text room after {self.n_patches} image tokens"
            )

    @property
    def n_patches(self) -> int:
        return (self.image_px // self.patch_px) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_px * self.patch_px * 3

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**dict(data))


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar parameters for ``cfg``."""
    d, v = cfg.d_model, cfg.vocab_size
    hidden = cfg.mlp_ratio * d
    per_layer = 4 * d + 4 * (d * d + d) + (hidden * d + hidden) + (d * hidden + d)
    projector = cfg.patch_dim * d + d
    embeddings = v * d + cfg.max_seq * d
    head = 2 * d + v * d + v
    return projector + embeddings + cfg.n_layers * per_layer + head


@dataclass(frozen=True)
class SequenceLayout:
    """Half-open position intervals of one prompt inside the model sequence."""

    image_span: tuple[int, int]
    text_span: tuple[int, int]
    last_index: int

    def __post_init__(self) -> None:
        (i0, i1), (t0, t1) = self.image_span, self.text_span
        if not (0 <= i0 < i1 <= t0 < t1) or self.last_index != t1 - 1:
            raise ContractError(f"invalid sequence layout {self}")

    @property
    def length(self) -> int:
        return self.last_index + 1


@dataclass
class HiddenStateCache:
    """Per-layer post-block hidden states of one sequence, each ``[T, d_model]``."""

    layers: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def layer(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self.layers):
            raise ContractError(f"layer {index} outside [0, {len(self.layers)})")
        return self.layers[index]


@dataclass(frozen=True)
class FreezeMask:
    """Trainable flag per parameter group."""

    flags: dict[str, bool]

    def __getitem__(self, group: str) -> bool:
        return self.flags[group]

    @property
    def trainable_groups(self) -> list[str]:
        return [group for group, flag in self.flags.items() if flag]


@dataclass
class ForwardOutput:
    """Result of a batched forward pass (right-padded to the longest prompt)."""

    logits: Tensor
    hidden: list[Tensor]
    layouts: list[SequenceLayout]


@dataclass
class Model:
    """Parameters of the toy model plus instrumentation.

    Parameters are replaced, never mutated in place, by the trainer.
    """

    cfg: ModelConfig
    params: dict[str, Tensor]
    forward_sequences: int = 0
    freeze_mask: FreezeMask | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def group_names(self) -> list[str]:
        layers = [layer_group(i) for i in range(self.cfg.n_layers)]
        return [PROJECTOR, EMBEDDINGS, *layers, LM_HEAD]

    def group_params(self, group: str) -> list[str]:
        """Names of the parameters that belong to ``group``."""
        return [name for name in self.params if group_of(name) == group]

    def num_parameters(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())

    def count_forward(self, n: int) -> None:
        with self._lock:
            self.forward_sequences += n
        record_forward(n)

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy every parameter array (for bit-identity comparisons)."""
        return {name: p.data.copy() for name, p in self.params.items()}

    def clone(self) -> "Model":
        """Independent copy with the same parameter values and trainable flags."""
        params = {
            name: Tensor(p.data, requires_grad=p.requires_grad, name=name)
            for name, p in self.params.items()
        }
        return Model(cfg=self.cfg, params=params, freeze_mask=self.freeze_mask)


def group_of(param_name: str) -> str:
    """Map a parameter name to its group."""
    head = param_name.split(".", 1)[0]
    if head == "layer":
        return ".".join(param_name.split(".", 2)[:2])
    if head in ("final_norm", LM_HEAD):
        return LM_HEAD
    if head == "embed":
        return EMBEDDINGS
    return PROJECTOR


def group_parameter_counts(model: Model) -> dict[str, int]:
    """Scalar parameter count per group."""
    counts = dict.fromkeys(model.group_names, 0)
    for name, p in model.params.items():
        counts[group_of(name)] += int(p.data.size)
    return counts


def _param_shapes(cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...], str]]:
    """Yield (name, shape, init) in canonical order; init is 'xavier', 'zeros' or 'ones'."""
    d, v = cfg.d_model, cfg.vocab_size
    hidden = cfg.mlp_ratio * d
    yield "projector.weight", (d, cfg.patch_dim), "xavier"
    yield "projector.bias", (d,), "zeros"
    yield "embed.token", (v, d), "xavier"
    yield "embed.position", (cfg.max_seq, d), "xavier"
    for i in range(cfg.n_layers):
        p = layer_group(i)
        yield f"{p}.ln1.gamma", (d,), "ones"
        yield f"{p}.ln1.beta", (d,), "zeros"
        for proj in ("wq", "wk", "wv", "wo"):
            yield f"{p}.attn.{proj}.weight", (d, d), "xavier"
            yield f"{p}.attn.{proj}.bias", (d,), "zeros"
        yield f"{p}.ln2.gamma", (d,), "ones"
        yield f"{p}.ln2.beta", (d,), "zeros"
        yield f"{p}.mlp.fc.weight", (hidden, d), "xavier"
        yield f"{p}.mlp.fc.bias", (hidden,), "zeros"
        yield f"{p}.mlp.proj.weight", (d, hidden), "xavier"
        yield f"{p}.mlp.proj.bias", (d,), "zeros"
    yield "final_norm.gamma", (d,), "ones"
    yield "final_norm.beta", (d,), "zeros"
    yield "lm_head.weight", (v, d), "xavier"
    yield "lm_head.bias", (v,), "zeros"


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Create a model with Xavier weights, zero biases and unit layernorm gains.

    Each weight matrix draws from its own child seed, so the values do not
    depend on construction order.
    """
    if not isinstance(cfg, ModelConfig):
        raise ConfigError(f"expected ModelConfig, got {type(cfg).__name__}")
    params: dict[str, Tensor] = {}
    for name, shape, init in _param_shapes(cfg):
        if init == "xavier":
            tensor = xavier_uniform(shape, derive_seed(seed, name))
        elif init == "ones":
            tensor = ones(shape)
        else:
            tensor = zeros(shape)
        tensor.name = name
        params[name] = tensor
    model = Model(cfg=cfg, params=params)
    logger.debug("🚀 Built model with %d parameters (seed=%d)", model.num_parameters(), seed)
    return model


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _check_images(cfg: ModelConfig, images: np.ndarray) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[1:] != (cfg.image_px, cfg.image_px, 3):
        raise DimensionError(
            f"expected images of shape [B, {cfg.image_px}, {cfg.image_px}, 3], got {arr.shape}"
        )
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ContractError("image values must lie in [0, 1]")
    return arr.astype(get_default_dtype(), copy=False)


def patchify(cfg: ModelConfig, images: np.ndarray) -> np.ndarray:
    """Cut ``[B, H, W, 3]`` images into row-major ``[B, n_patches, patch_dim]`` patches."""
    b = images.shape[0]
    n, p = cfg.image_px // cfg.patch_px, cfg.patch_px
    grid = images.reshape(b, n, p, n, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return grid.reshape(b, n * n, cfg.patch_dim)


def _linear(model: Model, x: Tensor, prefix: str) -> Tensor:
    return add(matmul(x, transpose(model[f"{prefix}.weight"])), model[f"{prefix}.bias"])


def encode_image(model: Model, img: np.ndarray) -> np.ndarray:
    """Project each patch of one image into the model width.

    Args:
        model (Model): Model whose projector is used.
        img (np.ndarray): ``[image_px, image_px, 3]`` grid with values in [0, 1].

    Returns:
        np.ndarray: ``[n_patches, d_model]`` image-token embeddings (before the
        IMG marker and position are added).

    Raises:
        DimensionError: If the image geometry does not match the model.

    """
    images = _check_images(model.cfg, np.asarray(img)[None])
    patches = Tensor(patchify(model.cfg, images)[0])
    return _linear(model, patches, PROJECTOR).data


def _block(model: Model, x: Tensor, index: int) -> Tensor:
    p = layer_group(index)
    h = layernorm(x, model[f"{p}.ln1.gamma"], model[f"{p}.ln1.beta"])
    q = _linear(model, h, f"{p}.attn.wq")
    k = _linear(model, h, f"{p}.attn.wk")
    v = _linear(model, h, f"{p}.attn.wv")
    attn = causal_attention(q, k, v, model.cfg.n_heads)
    x = add(x, _linear(model, attn, f"{p}.attn.wo"))
    h = layernorm(x, model[f"{p}.ln2.gamma"], model[f"{p}.ln2.beta"])
    h = gelu(_linear(model, h, f"{p}.mlp.fc"))
    return add(x, _linear(model, h, f"{p}.mlp.proj"))


def forward_batch(
    model: Model, prompts: Sequence[Sequence[int]], images: np.ndarray
) -> ForwardOutput:
    """Run a right-padded batch of (prompt ids, image) pairs through the model.

    Positions past a prompt's end hold PAD tokens; causal attention keeps them
    from influencing the real positions.

    Raises:
        ContractError: If the batch is empty or prompt and image counts differ.
        LengthError: If a sequence would exceed ``max_seq``.

    """
    cfg = model.cfg
    if not prompts:
        raise ContractError("forward needs at least one prompt")
    imgs = _check_images(cfg, images)
    if imgs.shape[0] != len(prompts):
        raise ContractError(f"{len(prompts)} prompts but {imgs.shape[0]} images")

    n_img = cfg.n_patches
    text_lens = [len(p) + 1 for p in prompts]
    total = n_img + max(text_lens)
    if total > cfg.max_seq:
        raise LengthError(f"sequence of {total} tokens exceeds max_seq {cfg.max_seq}")

    batch = len(prompts)
    ids = np.full((batch, total), tokenizer.PAD, dtype=np.int64)
    ids[:, :n_img] = tokenizer.IMG
    layouts = []
    for row, prompt in enumerate(prompts):
        ids[row, n_img] = tokenizer.BOS
        ids[row, n_img + 1 : n_img + text_lens[row]] = np.asarray(prompt, dtype=np.int64)
        end = n_img + text_lens[row]
        layouts.append(SequenceLayout((0, n_img), (n_img, end), end - 1))

    select = np.zeros((n_img, total), dtype=get_default_dtype())
    select[np.arange(n_img), np.arange(n_img)] = 1.0
    projected = _linear(model, Tensor(patchify(cfg, imgs)), PROJECTOR)
    placed = transpose(matmul(transpose(projected), Tensor(select)))

    x = add(embedding(model["embed.token"], ids), placed)
    positions = np.broadcast_to(np.arange(total), (batch, total))
    x = add(x, embedding(model["embed.position"], positions))

    hidden = []
    for i in range(cfg.n_layers):
        x = _block(model, x, i)
        hidden.append(x)

    x = layernorm(x, model["final_norm.gamma"], model["final_norm.beta"])
    logits = _linear(model, x, LM_HEAD)
    model.count_forward(batch)
    return ForwardOutput(logits=logits, hidden=hidden, layouts=layouts)


def forward(
    model: Model, tokens: Sequence[int], img: np.ndarray
) -> tuple[np.ndarray, HiddenStateCache, SequenceLayout]:
    """Single-prompt forward pass.

    Returns:
        tuple: ``[T, vocab]`` logits, the hidden-state cache (one ``[T, d]``
        matrix per layer) and the sequence layout.

    """
    out = forward_batch(model, [list(tokens)], np.asarray(img)[None])
    cache = HiddenStateCache(layers=[h.data[0] for h in out.hidden])
    return out.logits.data[0], cache, out.layouts[0]


def generate_batch(
    model: Model, prompts: Sequence[Sequence[int]], images: np.ndarray, max_new: int
) -> list[str]:
    """Greedy decoding for a batch; each row stops at EOS, max_new or max_seq."""
    if max_new < 1:
        raise ContractError(f"max_new must be >= 1, got {max_new}")
    imgs = np.asarray(images)
    seqs = [list(p) for p in prompts]
    produced: list[list[int]] = [[] for _ in seqs]
    active = list(range(len(seqs)))
    room = model.cfg.max_seq - model.cfg.n_patches - 1

    for _ in range(max_new):
        if not active:
            break
        out = forward_batch(model, [seqs[i] for i in active], imgs[active])
        still_active = []
        for row, i in enumerate(active):
            token = int(np.argmax(out.logits.data[row, out.layouts[row].last_index]))
            if token == tokenizer.EOS:
                continue
            produced[i].append(token)
            seqs[i].append(token)
            if len(seqs[i]) <= room:
                still_active.append(i)
        active = still_active
    return [tokenizer.decode(tokens) for tokens in produced]


def generate(model: Model, tokens: Sequence[int], img: np.ndarray, max_new: int) -> str:
    """Greedy decoding for a single prompt."""
    return generate_batch(model, [list(tokens)], np.asarray(img)[None], max_new)[0]


# ---------------------------------------------------------------------------
# Freeze control
# ---------------------------------------------------------------------------


def set_trainable(model: Model, groups: Sequence[str], finetune_policy: bool = True) -> FreezeMask:
    """Make exactly the named parameter groups trainable.

    Under the fine-tuning policy the projector may never be trained and
    ``lm_head`` is always trainable.

    Raises:
        ConfigError: On an unknown group name, or a projector request under the policy.

    """
    names = set(groups)
    unknown = names - set(model.group_names)
    if unknown:
        raise ConfigError(f"Unknown parameter groups: {sorted(unknown)}")
    if finetune_policy:
        if PROJECTOR in names:
            raise ConfigError("the projector stays frozen during fine-tuning")
        names.add(LM_HEAD)

    mask = FreezeMask(flags={group: group in names for group in model.group_names})
    for name, param in model.params.items():
        param.requires_grad = mask[group_of(name)]
    model.freeze_mask = mask
    return mask


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_bytes(model: Model) -> bytes:
    """Serialize a model into the versioned PLAB container.

    Layout: magic, version (u32), config JSON length (u32) + bytes, parameter
    count (u32), then per parameter: name length (u16) + UTF-8 name, rank (u8),
    extents (u32 each) and the values as little-endian float32.
    """
    cfg_json = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(struct.pack("<I", len(cfg_json)) + cfg_json)
    parts.append(struct.pack("<I", len(model.params)))
    for name, param in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", param.ndim) + struct.pack(f"<{param.ndim}I", *param.shape))
        parts.append(np.ascontiguousarray(param.data, dtype="<f4").tobytes())
    return b"".join(parts)


def model_from_bytes(blob: bytes) -> Model:
    """Rebuild a model from :func:`checkpoint_bytes` output.

    Raises:
        DatasetFormatError: On a bad magic, unsupported version or truncated payload.

    """
    view = memoryview(blob)
    offset = 0

    def take(fmt: str) -> tuple[Any, ...]:
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(view):
            raise DatasetFormatError("checkpoint is truncated")
        values = struct.unpack_from(fmt, view, offset)
        offset += size
        return values

    def take_bytes(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(view):
            raise DatasetFormatError("checkpoint is truncated")
        chunk = bytes(view[offset : offset + size])
        offset += size
        return chunk

    if take_bytes(4) != CHECKPOINT_MAGIC:
        raise DatasetFormatError("not a PLAB checkpoint")
    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = take("<I")
    try:
        cfg = ModelConfig.from_dict(json.loads(take_bytes(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise DatasetFormatError(f"invalid checkpoint config: {e}") from e

    (count,) = take("<I")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = take_bytes(name_len).decode("utf-8")
        (rank,) = take("<B")
        shape = take(f"<{rank}I")
        values = np.frombuffer(take_bytes(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
        params[name] = Tensor(values, requires_grad=True, name=name, dtype=get_default_dtype())
    if offset != len(view):
        raise DatasetFormatError("trailing bytes after checkpoint payload")

    expected = [name for name, _, _ in _param_shapes(cfg)]
    if list(params) != expected:
        raise DatasetFormatError("checkpoint parameters do not match its config")
    return Model(cfg=cfg, params=params)


def save_checkpoint(model: Model, path: str) -> str:
    """Write the checkpoint atomically; returns the path."""
    from app.output_handler import write_bytes

    return write_bytes(path, checkpoint_bytes(model), kind="checkpoint")


def load_checkpoint(path: str) -> Model:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as handle:
        return model_from_bytes(handle.read())

"""Task-aware transformer decoder: task interaction over the fused tokens and
per-task task queries against the interacted feature."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import LN_EPS
from .exceptions import ShapeError, ValidationError
from .logger import logger
from .mixer import DeformedFeature
from .nn import (
    LinearParams,
    NormParams,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
)
from .tensor import (
    Array,
    Tensor,
    concat,
    getitem,
    matmul,
    reshape,
    scale,
    softmax,
    stack,
    transpose,
)


@dataclass
class AttentionParams:
    """Query/key/value/output projections of one multi-head attention block."""

    heads: int
    query: LinearParams
    key: LinearParams
    value: LinearParams
    output: LinearParams

    def __post_init__(self) -> None:
        channels = self.query.in_features
        if self.heads < 1 or channels % self.heads:
            raise ValidationError(
                f"heads ({self.heads}) must divide the channel count ({channels})"
            )

    @property
    def channels(self) -> int:
        return self.query.in_features

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass
class SmlpParams:
    linear: LinearParams
    norm: NormParams


@dataclass
class TaskInteractionParams:
    norm: NormParams
    attention: AttentionParams
    smlp: SmlpParams


@dataclass
class TaskQueryParams:
    """Shared by every task; only the queries differ between tasks."""

    query_norm: NormParams
    key_norm: NormParams
    attention: AttentionParams
    smlp: SmlpParams


@dataclass
class DecoderParams:
    interaction: TaskInteractionParams
    query: Optional[TaskQueryParams] = None


@dataclass
class FusedFeature:
    """Task-major concatenation of deformed tokens: [B, T*N, C']."""

    tokens: Tensor
    num_tasks: int

    @property
    def tokens_per_task(self) -> int:
        return self.tokens.shape[1] // self.num_tasks


@dataclass
class TaskInteractedFeature:
    tokens: Tensor
    num_tasks: int


@dataclass
class TaskAwareFeature:
    """Per-task decoder output reshaped to a map [B, h, w, C']."""

    map: Tensor

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        return self.map.shape[1], self.map.shape[2]


def init_attention(
    rng: np.random.Generator, channels: int, heads: int
) -> AttentionParams:
    return AttentionParams(
        heads=heads,
        query=init_linear(rng, channels, channels),
        key=init_linear(rng, channels, channels),
        value=init_linear(rng, channels, channels),
        output=init_linear(rng, channels, channels),
    )


def init_smlp(
    rng: np.random.Generator, channels: int, ln_eps: float = LN_EPS
) -> SmlpParams:
    return SmlpParams(
        linear=init_linear(rng, channels, channels),
        norm=init_layer_norm(channels, ln_eps),
    )


def init_task_interaction(
    rng: np.random.Generator, channels: int, heads: int, ln_eps: float = LN_EPS
) -> TaskInteractionParams:
    return TaskInteractionParams(
        norm=init_layer_norm(channels, ln_eps),
        attention=init_attention(rng, channels, heads),
        smlp=init_smlp(rng, channels, ln_eps),
    )


def init_task_query(
    rng: np.random.Generator, channels: int, heads: int, ln_eps: float = LN_EPS
) -> TaskQueryParams:
    return TaskQueryParams(
        query_norm=init_layer_norm(channels, ln_eps),
        key_norm=init_layer_norm(channels, ln_eps),
        attention=init_attention(rng, channels, heads),
        smlp=init_smlp(rng, channels, ln_eps),
    )


def init_decoder(
    rng: np.random.Generator,
    channels: int,
    heads: int,
    with_query: bool = True,
    ln_eps: float = LN_EPS,
) -> DecoderParams:
    interaction = init_task_interaction(rng, channels, heads, ln_eps)
    query = init_task_query(rng, channels, heads, ln_eps) if with_query else None
    return DecoderParams(interaction=interaction, query=query)


def mhsa(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    p: AttentionParams,
    attention_sink: Optional[List[Array]] = None,
) -> Tensor:
    """Multi-head scaled dot-product attention over token sequences.

    Args:
        q: Queries [B, Nq, C]
        k: Keys [B, Nk, C]
        v: Values [B, Nk, C]
        p: Projection parameters; heads must divide C
        attention_sink: When given, every [Nq, Nk] weight matrix is appended to it

    Returns:
        Attended tokens [B, Nq, C]
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(
            f"mhsa expects [B,N,C] inputs, got {q.shape}, {k.shape}, {v.shape}"
        )
    if k.shape != v.shape or q.shape[0] != k.shape[0]:
        raise ShapeError(f"mhsa key/value mismatch: {q.shape}, {k.shape}, {v.shape}")
    if not q.shape[2] == k.shape[2] == p.channels:
        raise ShapeError(
            f"mhsa expects {p.channels} channels, got {q.shape[2]} and {k.shape[2]}"
        )
    qp = linear(q, p.query)
    kp = linear(k, p.key)
    vp = linear(v, p.value)
    dk = p.head_dim
    inv_sqrt = 1.0 / np.sqrt(dk)
    batches = []
    for b in range(q.shape[0]):
        heads = []
        for h in range(p.heads):
            cols = slice(h * dk, (h + 1) * dk)
            qh = getitem(qp, (b, slice(None), cols))
            kh = getitem(kp, (b, slice(None), cols))
            vh = getitem(vp, (b, slice(None), cols))
            weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), axis=-1)
            if attention_sink is not None:
                attention_sink.append(weights.numpy())
            heads.append(matmul(weights, vh))
        batches.append(concat(heads, axis=-1))
    return linear(stack(batches, axis=0), p.output)


def smlp(x: Tensor, p: SmlpParams) -> Tensor:
    """layer_norm(linear(x))."""
    if x.shape[-1] != p.linear.in_features:
        raise ShapeError(
            f"smlp expects {p.linear.in_features} channels, got {x.shape[-1]}"
        )
    return layer_norm(linear(x, p.linear), p.norm)


def fuse_features(features: Sequence[DeformedFeature]) -> FusedFeature:
    """Concatenate task tokens along the token axis, task 0 first."""
    if not features:
        raise ValidationError("fuse_features needs at least one task feature")
    first = features[0]
    for i, feature in enumerate(features[1:], start=1):
        if feature.tokens.shape != first.tokens.shape:
            raise ShapeError(
                f"task {i} tokens {feature.tokens.shape} differ from task 0 "
                f"tokens {first.tokens.shape}"
            )
    return FusedFeature(concat([f.tokens for f in features], axis=1), len(features))


def task_interaction(
    features: Sequence[DeformedFeature],
    p: TaskInteractionParams,
    attention_sink: Optional[List[Array]] = None,
) -> TaskInteractedFeature:
    """Self-attention over the fused tokens of all tasks, followed by the sMLP."""
    fused = fuse_features(features)
    normed = layer_norm(fused.tokens, p.norm)
    attended = mhsa(normed, normed, normed, p.attention, attention_sink)
    return TaskInteractedFeature(smlp(attended, p.smlp), fused.num_tasks)


def identity_interaction(features: Sequence[DeformedFeature]) -> TaskInteractedFeature:
    """Pass the fused tokens through unchanged (interaction block ablated)."""
    fused = fuse_features(features)
    return TaskInteractedFeature(fused.tokens, fused.num_tasks)


def task_query(
    deformed: DeformedFeature,
    interacted: TaskInteractedFeature,
    p: TaskQueryParams,
    attention_sink: Optional[List[Array]] = None,
) -> TaskAwareFeature:
    """Let one task's deformed tokens query the interacted feature.

    The result keeps a residual from the deformed tokens and is reshaped back to
    the feature-grid map.
    """
    if deformed.channels != interacted.tokens.shape[2]:
        raise ShapeError(
            f"task_query channel mismatch: {deformed.channels} vs "
            f"{interacted.tokens.shape[2]}"
        )
    queries = layer_norm(deformed.tokens, p.query_norm)
    keys = layer_norm(interacted.tokens, p.key_norm)
    attended = mhsa(queries, keys, keys, p.attention, attention_sink)
    out = deformed.tokens + smlp(attended, p.smlp)
    b, _, c = out.shape
    h, w = deformed.spatial_shape
    return TaskAwareFeature(reshape(out, (b, h, w, c)))


def interacted_slice(
    interacted: TaskInteractedFeature, index: int, spatial_shape: Sequence[int]
) -> TaskAwareFeature:
    """Cut task `index`'s tokens out of the interacted feature as a map."""
    if not 0 <= index < interacted.num_tasks:
        raise ValidationError(
            f"task index {index} out of range for {interacted.num_tasks} tasks"
        )
    b, total, c = interacted.tokens.shape
    n = total // interacted.num_tasks
    window = (slice(None), slice(index * n, (index + 1) * n))
    rows = getitem(interacted.tokens, window)
    h, w = spatial_shape
    return TaskAwareFeature(reshape(rows, (b, h, w, c)))


def decoder_forward(
    features: Sequence[DeformedFeature],
    p: DecoderParams,
    attention_sink: Optional[List[Array]] = None,
) -> List[TaskAwareFeature]:
    """Interaction block once, then one task query per task (shared weights).

    Without query parameters the heads read the interacted slices directly.
    """
    interacted = task_interaction(features, p.interaction, attention_sink)
    if p.query is None:
        return [
            interacted_slice(interacted, t, f.spatial_shape)
            for t, f in enumerate(features)
        ]
    logger.debug(
        f"decoder: {len(features)} tasks querying {interacted.tokens.shape[1]} tokens"
    )
    return [task_query(f, interacted, p.query, attention_sink) for f in features]

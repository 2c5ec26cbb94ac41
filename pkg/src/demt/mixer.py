"""Deformable mixer encoder: one branch per task producing deformed token features.

Each branch reduces the aggregated channels once and then repeats a mixer block
`depth` times. A block mixes channels with a 1x1 convolution, predicts per-pixel
sampling offsets from the mixed feature, reads K fractional positions around every
pixel and folds the K samples back to C' channels.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .config import BN_EPS, BN_MOMENTUM, LN_EPS
from .exceptions import ShapeError, ValidationError
from .logger import logger
from .nn import (
    LinearParams,
    NormParams,
    batch_norm,
    bilinear_sample,
    conv2d,
    gelu,
    init_batch_norm,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    pointwise_conv,
    uniform_weight,
    zeros_parameter,
)
from .tensor import Array, Tensor, matmul, reshape

OFFSET_KERNEL = 3


@dataclass
class ChannelMixParams:
    weight: Tensor  # W1 [C', C']
    bias: Tensor  # b [C']
    bn: NormParams


@dataclass
class MixerBlockParams:
    channel_mix: ChannelMixParams
    offset_weight: Tensor  # [2K, 3, 3, C'], zero at init
    offset_bias: Tensor  # [2K], zero at init
    deform_weight: Tensor  # W2 [K, C', C'], rows index input channels
    deform_bn: NormParams

    @property
    def sampling_points(self) -> int:
        return self.deform_weight.shape[0]


@dataclass
class DeformableMixerParams:
    """Parameters of one task's encoder branch."""

    reduce: LinearParams
    reduce_norm: NormParams
    blocks: List[MixerBlockParams]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def in_channels(self) -> int:
        return self.reduce.in_features

    @property
    def reduced_channels(self) -> int:
        return self.reduce.out_features


@dataclass
class DeformedFeature:
    """Flattened encoder output: tokens [B, N, C'] with N = h * w."""

    tokens: Tensor
    spatial_shape: Tuple[int, int]

    def __post_init__(self) -> None:
        h, w = self.spatial_shape
        if self.tokens.ndim != 3 or self.tokens.shape[1] != h * w:
            raise ShapeError(
                f"tokens {self.tokens.shape} do not match spatial shape {h}x{w}"
            )

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]

    def as_map(self) -> Tensor:
        """Reshape the tokens back to [B, h, w, C']."""
        h, w = self.spatial_shape
        return reshape(self.tokens, (self.tokens.shape[0], h, w, self.channels))


def kernel_side(sampling_points: int) -> int:
    """Side of the square base neighbourhood for K sampling points."""
    side = int(round(np.sqrt(sampling_points)))
    if side * side != sampling_points or side % 2 == 0:
        raise ValidationError(
            "sampling points must be an odd square (1, 9, 25, ...), "
            f"got {sampling_points}"
        )
    return side


def sampling_grid(height: int, width: int, sampling_points: int) -> Array:
    """Base positions [h, w, K, 2]: the k x k neighbourhood of each pixel, row-major."""
    side = kernel_side(sampling_points)
    half = side // 2
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    grid = np.zeros((height, width, sampling_points, 2))
    k = 0
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            grid[:, :, k, 0] = rows + dy
            grid[:, :, k, 1] = cols + dx
            k += 1
    return grid


def init_deformable_mixer(
    rng: np.random.Generator,
    in_channels: int,
    reduced_channels: int,
    depth: int,
    sampling_points: int = 9,
    ln_eps: float = LN_EPS,
    bn_eps: float = BN_EPS,
    bn_momentum: float = BN_MOMENTUM,
) -> DeformableMixerParams:
    """Fresh branch parameters; offset predictors start at zero (regular grid)."""
    if depth < 1:
        raise ValidationError(f"depth must be >= 1, got {depth}")
    kernel_side(sampling_points)
    c = reduced_channels
    blocks = []
    for _ in range(depth):
        mix = ChannelMixParams(
            weight=uniform_weight(rng, (c, c), c),
            bias=zeros_parameter((c,)),
            bn=init_batch_norm(c, bn_eps, bn_momentum),
        )
        blocks.append(
            MixerBlockParams(
                channel_mix=mix,
                offset_weight=zeros_parameter(
                    (2 * sampling_points, OFFSET_KERNEL, OFFSET_KERNEL, c)
                ),
                offset_bias=zeros_parameter((2 * sampling_points,)),
                deform_weight=uniform_weight(
                    rng, (sampling_points, c, c), sampling_points * c
                ),
                deform_bn=init_batch_norm(c, bn_eps, bn_momentum),
            )
        )
    return DeformableMixerParams(
        reduce=init_linear(rng, in_channels, reduced_channels),
        reduce_norm=init_layer_norm(in_channels, ln_eps),
        blocks=blocks,
    )


def reduce_channels(x: Tensor, p: DeformableMixerParams) -> Tensor:
    """LayerNorm then a linear map C -> C' at every position."""
    if x.ndim != 4 or x.shape[-1] != p.in_channels:
        raise ShapeError(
            f"reduce_channels expects [B,H,W,{p.in_channels}], got {x.shape}"
        )
    return linear(layer_norm(x, p.reduce_norm), p.reduce)


def channel_mix(x: Tensor, p: ChannelMixParams, mode: str) -> Tensor:
    """BN(GELU(pointwise_conv(x)))."""
    if x.ndim != 4 or x.shape[-1] != p.weight.shape[1]:
        raise ShapeError(
            f"channel_mix expects [B,H,W,{p.weight.shape[1]}], got {x.shape}"
        )
    return batch_norm(gelu(pointwise_conv(x, p.weight, p.bias)), p.bn, mode)


def predict_offsets(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel (dy, dx) displacements [B, h, w, K, 2] in feature-grid pixels."""
    if weight.shape[0] % 2:
        raise ShapeError(
            f"offset predictor needs an even output count, got {weight.shape[0]}"
        )
    raw = conv2d(x, weight, bias)
    b, h, w, _ = x.shape
    return reshape(raw, (b, h, w, weight.shape[0] // 2, 2))


def spatial_deform(x: Tensor, offsets: Tensor, weight: Tensor) -> Tensor:
    """Sample K displaced points per pixel and mix them: out = sum_k s_k . W2[k].

    Args:
        x: Feature [B, h, w, C']
        offsets: Displacements [B, h, w, K, 2] added to the base neighbourhood
        weight: W2 [K, C', C'], W2[k] maps input channels (rows) to outputs

    Returns:
        Deformed feature [B, h, w, C']
    """
    if x.ndim != 4:
        raise ShapeError(f"spatial_deform expects [B,H,W,C], got {x.shape}")
    b, h, w, c = x.shape
    k = weight.shape[0]
    if offsets.shape != (b, h, w, k, 2):
        raise ShapeError(
            f"offsets must be {(b, h, w, k, 2)} for {k} sampling points, "
            f"got {offsets.shape}"
        )
    if weight.shape[1] != c:
        raise ShapeError(f"W2 expects {weight.shape[1]} input channels, got {c}")
    base = Tensor(np.broadcast_to(sampling_grid(h, w, k), offsets.shape))
    sampled = bilinear_sample(x, offsets + base)
    mixed = matmul(
        reshape(sampled, (b * h * w, k * c)),
        reshape(weight, (k * c, weight.shape[2])),
    )
    return reshape(mixed, (b, h, w, weight.shape[2]))


def mixer_block(x: Tensor, p: MixerBlockParams, mode: str) -> Tensor:
    """One repetition: channel mix, deformable sampling, residual from the mix."""
    mixed = channel_mix(x, p.channel_mix, mode)
    offsets = predict_offsets(mixed, p.offset_weight, p.offset_bias)
    deformed = spatial_deform(mixed, offsets, p.deform_weight)
    return mixed + batch_norm(gelu(deformed), p.deform_bn, mode)


def deformable_mixer_forward(
    x: Tensor, p: DeformableMixerParams, mode: str
) -> DeformedFeature:
    """Run one task branch on the aggregated feature [B, h, w, C]."""
    out = reduce_channels(x, p)
    for block in p.blocks:
        out = mixer_block(out, block, mode)
    b, h, w, c = out.shape
    logger.debug(f"deformable mixer: depth={p.depth} tokens={h * w} channels={c}")
    return DeformedFeature(reshape(out, (b, h * w, c)), (h, w))

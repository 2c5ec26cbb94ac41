"""Neural building blocks over channel-last [B, H, W, C] tensors."""

import dataclasses
from dataclasses import dataclass
from typing import Any, Iterator, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .config import BN_EPS, BN_MOMENTUM, LN_EPS, MODE_TRAIN, MODES
from .exceptions import ShapeError, ValidationError
from .tensor import (
    Array,
    Tensor,
    apply_op,
    div,
    expand,
    getitem,
    matmul,
    pad,
    parameter,
    reduce_mean,
    reduce_sum,
    reshape,
    sqrt,
    transpose,
)


@dataclass
class LinearParams:
    """Affine map over the last axis: weight [out, in], optional bias [out]."""

    weight: Tensor
    bias: Optional[Tensor] = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class NormParams:
    """Affine normalisation parameters; running statistics only for batch norm."""

    gamma: Tensor
    beta: Tensor
    running_mean: Optional[Array] = None
    running_var: Optional[Array] = None
    momentum: float = BN_MOMENTUM
    eps: float = LN_EPS

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def uniform_weight(
    rng: np.random.Generator, shape: Sequence[int], fan_in: int
) -> Tensor:
    """Trainable tensor drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=tuple(shape)))


def zeros_parameter(shape: Sequence[int]) -> Tensor:
    return parameter(np.zeros(tuple(shape)))


def init_linear(
    rng: np.random.Generator, in_features: int, out_features: int, bias: bool = True
) -> LinearParams:
    weight = uniform_weight(rng, (out_features, in_features), in_features)
    return LinearParams(weight, zeros_parameter((out_features,)) if bias else None)


def init_layer_norm(channels: int, eps: float = LN_EPS) -> NormParams:
    return NormParams(
        gamma=parameter(np.ones(channels)),
        beta=zeros_parameter((channels,)),
        eps=eps,
    )


def init_batch_norm(
    channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM
) -> NormParams:
    if eps <= 0:
        raise ValidationError(f"batch norm eps must be positive, got {eps}")
    if not 0.0 < momentum < 1.0:
        raise ValidationError(
            f"batch norm momentum must be in (0, 1), got {momentum}"
        )
    return NormParams(
        gamma=parameter(np.ones(channels)),
        beta=zeros_parameter((channels,)),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
        momentum=momentum,
        eps=eps,
    )


def named_tensors(obj: Any, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
    """Walk dataclasses and lists, yielding every Tensor with a dotted name."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            if child is not None:
                yield from named_tensors(child, _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, _join(prefix, str(i)))


def named_norms(obj: Any, prefix: str = "") -> Iterator[Tuple[str, NormParams]]:
    """Walk dataclasses and lists, yielding every NormParams with a dotted name."""
    if isinstance(obj, NormParams):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            if child is not None:
                yield from named_norms(child, _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_norms(item, _join(prefix, str(i)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """Affine map over the last axis of x."""
    if x.shape[-1] != p.in_features:
        raise ShapeError(
            f"linear expects last extent {p.in_features}, got {x.shape[-1]}"
        )
    lead = x.shape[:-1]
    flat = reshape(x, (-1, p.in_features))
    out = matmul(flat, transpose(p.weight))
    if p.bias is not None:
        out = out + expand(p.bias, out.shape)
    return reshape(out, lead + (p.out_features,))


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    """Per-position normalisation over the channel (last) axis."""
    if x.shape[-1] != p.channels:
        raise ShapeError(
            f"layer_norm expects {p.channels} channels, got {x.shape[-1]}"
        )
    shape = x.shape
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = x - expand(mu, shape)
    var = reduce_mean(centered * centered, axis=-1, keepdims=True)
    normed = div(centered, expand(sqrt(var + p.eps), shape))
    return normed * expand(p.gamma, shape) + expand(p.beta, shape)


def batch_norm(x: Tensor, p: NormParams, mode: str) -> Tensor:
    """Per-channel normalisation of [B, H, W, C] with batch or running statistics.

    Train mode normalises with the biased batch variance over B*H*W and updates
    the running statistics (running variance uses the unbiased estimate).

    Raises:
        ShapeError: If x is not 4-D or channels mismatch
        ValidationError: On an unknown mode, or fewer than two values per channel
            in train mode
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}, expected one of {MODES}")
    if x.ndim != 4 or x.shape[-1] != p.channels:
        raise ShapeError(f"batch_norm expects [B,H,W,{p.channels}], got {x.shape}")
    if p.running_mean is None or p.running_var is None:
        raise ValidationError("batch_norm needs running statistics")
    shape = x.shape
    axes = (0, 1, 2)
    if mode == MODE_TRAIN:
        count = shape[0] * shape[1] * shape[2]
        if count < 2:
            raise ValidationError(
                f"batch_norm in train mode needs B*H*W >= 2, got {count}"
            )
        mu = reduce_mean(x, axis=axes, keepdims=True)
        centered = x - expand(mu, shape)
        var = reduce_mean(centered * centered, axis=axes, keepdims=True)
        normed = div(centered, expand(sqrt(var + p.eps), shape))
        m = p.momentum
        p.running_mean = (1.0 - m) * p.running_mean + m * mu.data.reshape(-1)
        p.running_var = (1.0 - m) * p.running_var + m * var.data.reshape(-1) * (
            count / (count - 1)
        )
    else:
        mean_t = Tensor(np.broadcast_to(p.running_mean, shape))
        std_t = Tensor(np.broadcast_to(np.sqrt(p.running_var + p.eps), shape))
        normed = div(x - mean_t, std_t)
    return normed * expand(p.gamma, shape) + expand(p.beta, shape)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with the Gaussian CDF written through erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    return apply_op("gelu", xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def pointwise_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """1x1 convolution: weight [Cout, Cin] applied at every pixel of [B,H,W,Cin]."""
    if x.ndim != 4:
        raise ShapeError(f"pointwise_conv expects [B,H,W,C], got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[-1]:
        raise ShapeError(
            f"pointwise_conv weight {weight.shape} incompatible with input {x.shape}"
        )
    return linear(x, LinearParams(weight, bias))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1, zero 'same'-padded cross-correlation.

    Args:
        x: Input [B, H, W, Cin]
        weight: Kernel [Cout, k, k, Cin] with k odd
        bias: Optional [Cout]

    Returns:
        Output [B, H, W, Cout]
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}"
        )
    cout, k, k2, cin = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {k}x{k2}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d weight expects {cin} channels, got {x.shape[-1]}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must be [{cout}], got {bias.shape}")
    b, h, w, _ = x.shape
    half = k // 2
    padded = pad(x, ((0, 0), (half, half), (half, half), (0, 0))) if half else x
    acc: Optional[Tensor] = None
    for ky in range(k):
        for kx in range(k):
            window = (slice(None), slice(ky, ky + h), slice(kx, kx + w), slice(None))
            patch = getitem(padded, window)
            tap = getitem(weight, (slice(None), ky, kx, slice(None)))
            term = matmul(reshape(patch, (-1, cin)), transpose(tap))
            acc = term if acc is None else acc + term
    assert acc is not None
    if bias is not None:
        acc = acc + expand(bias, acc.shape)
    return reshape(acc, (b, h, w, cout))


@dataclass
class _SampleContext:
    x_shape: Tuple[int, ...]
    flat_index: Sequence[Array]
    weights: Sequence[Array]
    values: Sequence[Array]
    wy: Array
    wx: Array


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Read x at fractional (y, x) pixel positions.

    Args:
        x: Feature map [B, H, W, C]
        coords: Absolute positions [B, H, W, K, 2] as (y, x) pairs

    Returns:
        Samples [B, H, W, K, C]; neighbour taps outside the map read zero
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_sample expects [B,H,W,C], got {x.shape}")
    b, h, w, c = x.shape
    if coords.ndim != 5 or coords.shape[:3] != (b, h, w) or coords.shape[4] != 2:
        raise ShapeError(
            f"bilinear_sample coords must be [{b},{h},{w},K,2], got {coords.shape}"
        )
    xd = x.data
    ys = coords.data[..., 0]
    xs = coords.data[..., 1]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    batch = np.arange(b).reshape(b, 1, 1, 1)
    corner_weights = (
        (1.0 - wy) * (1.0 - wx),
        (1.0 - wy) * wx,
        wy * (1.0 - wx),
        wy * wx,
    )

    flat_index = []
    weights = []
    values = []
    out = None
    for (dy, dx), cw in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corner_weights):
        yi = y0i + dy
        xi = x0i + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        v = xd[batch, yc, xc] * valid[..., None]
        term = cw[..., None] * v
        out = term if out is None else out + term
        flat_index.append(((batch * h + yc) * w + xc).reshape(-1))
        weights.append(cw * valid)
        values.append(v)

    ctx = _SampleContext(x.shape, flat_index, weights, values, wy, wx)
    return apply_op(
        "bilinear_sample",
        out,
        (x, coords),
        lambda g: _bilinear_sample_backward(ctx, g),
    )


def _bilinear_sample_backward(ctx: _SampleContext, g: Array) -> Tuple[Array, Array]:
    b, h, w, c = ctx.x_shape
    dx_flat = np.zeros((b * h * w, c))
    for idx, cw in zip(ctx.flat_index, ctx.weights):
        contrib = (g * cw[..., None]).reshape(-1, c)
        for ch in range(c):
            dx_flat[:, ch] += np.bincount(
                idx, weights=contrib[:, ch], minlength=b * h * w
            )

    v00, v01, v10, v11 = ctx.values
    wy = ctx.wy[..., None]
    wx = ctx.wx[..., None]
    d_y = (g * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01))).sum(axis=-1)
    d_x = (g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10))).sum(axis=-1)
    return dx_flat.reshape(ctx.x_shape), np.stack([d_y, d_x], axis=-1)


def interpolation_matrix(n_in: int, n_out: int) -> Array:
    """Row i holds the align-corners=false bilinear weights of output i."""
    matrix = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * ratio - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        matrix[i, i0] += 1.0 - frac
        matrix[i, i1] += frac
    return matrix


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear upsampling of [B, h, w, C] to [B, out_h, out_w, C]."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects [B,H,W,C], got {x.shape}")
    _, h, w, _ = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(
            f"upsample_bilinear cannot shrink {h}x{w} to {out_h}x{out_w}"
        )
    rows = interpolation_matrix(h, out_h)
    cols = interpolation_matrix(w, out_w)
    tmp = np.einsum("ih,bhwc->biwc", rows, x.data)
    out = np.einsum("jw,biwc->bijc", cols, tmp)

    def rule(g: Array) -> Tuple[Array]:
        back = np.einsum("jw,bijc->biwc", cols, g)
        return (np.einsum("ih,biwc->bhwc", rows, back),)

    return apply_op("upsample_bilinear", out, (x,), rule)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping factor x factor average pooling."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool expects [B,H,W,C], got {x.shape}")
    b, h, w, c = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool factor {factor} does not divide {h}x{w}")
    blocks = reshape(x, (b, h // factor, factor, w // factor, factor, c))
    return reduce_mean(blocks, axis=(2, 4))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale every vector along the last axis to unit length."""
    norm = sqrt(reduce_sum(x * x, axis=-1, keepdims=True) + eps)
    return div(x, expand(norm, x.shape))

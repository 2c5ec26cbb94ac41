"""Finite-difference verification of every differentiable operation.

Each registered check builds a small random instance, projects the op's output
onto a fixed random direction and compares reverse-mode gradients with central
differences for every input that requires gradients.
"""

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import MODE_TRAIN
from .dataset import generate_scene, make_batch
from .decoder import (
    TaskAwareFeature,
    TaskInteractedFeature,
    init_attention,
    init_decoder,
    init_smlp,
    init_task_interaction,
    init_task_query,
    mhsa,
    smlp,
    task_interaction,
    task_query,
)
from .exceptions import GradCheckFailure
from .logger import logger
from .mixer import (
    DeformableMixerParams,
    DeformedFeature,
    channel_mix,
    deformable_mixer_forward,
    init_deformable_mixer,
    predict_offsets,
    reduce_channels,
    spatial_deform,
)
from .model import DemtModel, HeadParams, ModelConfig, head_forward, make_task_spec
from .nn import (
    avg_pool,
    batch_norm,
    bilinear_sample,
    conv2d,
    gelu,
    init_batch_norm,
    init_layer_norm,
    init_linear,
    l2_normalize,
    layer_norm,
    linear,
    pointwise_conv,
    upsample_bilinear,
)
from .tensor import (
    Array,
    Tensor,
    absolute,
    add,
    backward,
    concat,
    div,
    exp,
    expand,
    finite_diff_grad,
    getitem,
    log,
    log_softmax,
    matmul,
    mul,
    no_grad,
    pad,
    parameter,
    permute,
    reduce_mean,
    reduce_sum,
    reshape,
    softmax,
    sqrt,
    stack,
    sub,
)
from .training import compute_losses, task_loss

# (function under test, tensors to differentiate with respect to)
Instance = Tuple[Callable[[], Tensor], List[Tensor]]
Builder = Callable[[np.random.Generator], Instance]


@dataclass
class GradCheckResult:
    op: str
    instances: int
    worst_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err <= self.tolerance

    def format_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"op={self.op} instances={self.instances} "
            f"worst_rel_err={self.worst_rel_err:.3e} status={status}"
        )


def relative_error(analytic: Array, numeric: Array) -> float:
    """max|a - n| / max(max|a|, max|n|, 1e-6)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-6)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    rng: np.random.Generator,
    eps: float = 1e-5,
    indices: Optional[Dict[int, Sequence[int]]] = None,
) -> float:
    """Worst relative error between backward and central differences.

    Args:
        fn: Recomputes the output from the (mutable) tensors in `wrt`
        wrt: Leaf tensors to differentiate with respect to
        rng: Draws the projection direction
        eps: Finite-difference step
        indices: Optional flat positions to check per position in `wrt`
    """
    with no_grad():
        reference = fn()
    direction = Tensor(rng.standard_normal(reference.shape))

    def objective(_: Tensor) -> Tensor:
        return reduce_sum(fn() * direction)

    for t in wrt:
        t.zero_grad()
    backward(objective(reference))
    worst = 0.0
    for i, t in enumerate(wrt):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        picked = None if indices is None else indices.get(i)
        numeric = finite_diff_grad(objective, t, eps, picked)
        if picked is not None:
            analytic = analytic.reshape(-1)[list(picked)]
            numeric_values = numeric.data.reshape(-1)[list(picked)]
        else:
            numeric_values = numeric.data
        worst = max(worst, relative_error(analytic, numeric_values))
        t.zero_grad()
    return worst


def _leaf(
    rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0
) -> Tensor:
    return parameter(rng.uniform(low, high, shape))


def _away_from_zero(rng: np.random.Generator, *shape: int) -> Tensor:
    signs = rng.choice([-1.0, 1.0], size=shape)
    return parameter(signs * rng.uniform(0.5, 2.0, shape))


def _fractional(rng: np.random.Generator, shape: Sequence[int]) -> Array:
    """Values whose fractional part stays in [0.2, 0.8] (away from bilinear kinks)."""
    return rng.integers(-1, 2, size=shape) + rng.uniform(0.2, 0.8, size=shape)


def _binary(op: Callable[[Tensor, Tensor], Tensor]) -> Builder:
    def build(rng: np.random.Generator) -> Instance:
        a = _leaf(rng, 2, 3)
        b = _away_from_zero(rng, 2, 3)
        return (lambda: op(a, b)), [a, b]

    return build


def _unary(op: Callable[[Tensor], Tensor], positive: bool = False) -> Builder:
    def build(rng: np.random.Generator) -> Instance:
        if positive:
            a = _leaf(rng, 2, 3, low=0.5, high=2.0)
        else:
            a = _away_from_zero(rng, 2, 3)
        return (lambda: op(a)), [a]

    return build


def _build_matmul(rng: np.random.Generator) -> Instance:
    a, b = _leaf(rng, 2, 3), _leaf(rng, 3, 4)
    return (lambda: matmul(a, b)), [a, b]


def _build_permute(rng: np.random.Generator) -> Instance:
    a = _leaf(rng, 2, 3, 4)
    return (lambda: permute(a, (2, 0, 1))), [a]


def _build_reshape(rng: np.random.Generator) -> Instance:
    a = _leaf(rng, 2, 6)
    return (lambda: reshape(a, (3, 4))), [a]


def _build_expand(rng: np.random.Generator) -> Instance:
    a = _leaf(rng, 3, 1)
    return (lambda: expand(a, (2, 3, 4))), [a]


def _build_reduce_sum(rng: np.random.Generator) -> Instance:
    a = _leaf(rng, 2, 3, 4)
    return (lambda: reduce_sum(a, axis=(0, 2), keepdims=True)), [a]


def _build_reduce_mean(rng: np.random.Generator) -> Instance:
    a = _leaf(rng, 2, 3, 4)
    return (lambda: reduce_mean(a, axis=1)), [a]


def _build_softmax(rng: np.random.Generator) -> Instance:
    a = _leaf(rng, 3, 4, low=-2.0, high=2.0)
    return (lambda: softmax(a, axis=-1)), [a]


def _build_log_softmax(rng: np.random.Generator) -> Instance:
    a = _leaf(rng, 3, 4, low=-2.0, high=2.0)
    return (lambda: log_softmax(a, axis=0)), [a]


def _build_concat(rng: np.random.Generator) -> Instance:
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    return (lambda: concat([a, b], axis=1)), [a, b]


def _build_stack(rng: np.random.Generator) -> Instance:
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
    return (lambda: stack([a, b], axis=1)), [a, b]


def _build_getitem(rng: np.random.Generator) -> Instance:
    a = _leaf(rng, 3, 4, 2)
    return (lambda: getitem(a, (slice(1, 3), 2))), [a]


def _build_pad(rng: np.random.Generator) -> Instance:
    a = _leaf(rng, 2, 3)
    return (lambda: pad(a, ((1, 0), (2, 1)))), [a]


def _build_linear(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 2, 3, 4)
    p = init_linear(rng, 4, 3)
    p.bias = _leaf(rng, 3)
    return (lambda: linear(x, p)), [x, p.weight, p.bias]


def _build_layer_norm(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 2, 3, 5, low=-3.0, high=3.0)
    p = init_layer_norm(5)
    p.gamma, p.beta = _leaf(rng, 5), _leaf(rng, 5)
    return (lambda: layer_norm(x, p)), [x, p.gamma, p.beta]


def _build_batch_norm(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 2, 2, 3, 3, low=-3.0, high=3.0)
    p = init_batch_norm(3)
    p.gamma, p.beta = _leaf(rng, 3), _leaf(rng, 3)
    return (lambda: batch_norm(x, p, MODE_TRAIN)), [x, p.gamma, p.beta]


def _build_gelu(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 3, 4, low=-3.0, high=3.0)
    return (lambda: gelu(x)), [x]


def _build_pointwise_conv(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 1, 3, 3, 4)
    w, b = _leaf(rng, 2, 4), _leaf(rng, 2)
    return (lambda: pointwise_conv(x, w, b)), [x, w, b]


def _build_conv2d(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 1, 4, 4, 2)
    w, b = _leaf(rng, 2, 3, 3, 2), _leaf(rng, 2)
    return (lambda: conv2d(x, w, b)), [x, w, b]


def _build_bilinear_sample(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 1, 3, 4, 2)
    base = np.stack(
        np.meshgrid(np.arange(3), np.arange(4), indexing="ij"), axis=-1
    ).reshape(1, 3, 4, 1, 2)
    coords = parameter(base + _fractional(rng, (1, 3, 4, 2, 2)))
    return (lambda: bilinear_sample(x, coords)), [x, coords]


def _build_upsample(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 1, 2, 3, 2)
    return (lambda: upsample_bilinear(x, 8, 12)), [x]


def _build_avg_pool(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 1, 4, 4, 2)
    return (lambda: avg_pool(x, 2)), [x]


def _build_l2_normalize(rng: np.random.Generator) -> Instance:
    x = _away_from_zero(rng, 2, 3, 3)
    return (lambda: l2_normalize(x)), [x]


def randomize_offsets(
    p: DeformableMixerParams, rng: np.random.Generator, weight_scale: float = 0.01
) -> None:
    """Give offset predictors small random weights and mid-cell biases.

    Predicted displacements then sit near half a pixel, away from the integer
    coordinates where bilinear sampling is not differentiable.
    """
    for block in p.blocks:
        block.offset_weight.update_(
            rng.normal(0.0, weight_scale, block.offset_weight.shape)
        )
        block.offset_bias.update_(rng.uniform(0.4, 0.6, block.offset_bias.shape))


def _build_reduce_channels(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 1, 2, 2, 8, low=-2.0, high=2.0)
    p = init_deformable_mixer(rng, 8, 4, depth=1)
    return (lambda: reduce_channels(x, p)), [x, p.reduce.weight, p.reduce_norm.gamma]


def _build_channel_mix(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 1, 3, 3, 3, low=-2.0, high=2.0)
    p = init_deformable_mixer(rng, 3, 3, depth=1).blocks[0].channel_mix
    return (lambda: channel_mix(x, p, MODE_TRAIN)), [x, p.weight, p.bias]


def _build_predict_offsets(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 1, 3, 3, 2)
    block = init_deformable_mixer(rng, 2, 2, depth=1, sampling_points=1).blocks[0]
    w, b = block.offset_weight, block.offset_bias
    w.update_(rng.uniform(-1.0, 1.0, w.shape))
    return (lambda: predict_offsets(x, w, b)), [x, w, b]


def _build_spatial_deform(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 1, 3, 3, 2)
    offsets = parameter(_fractional(rng, (1, 3, 3, 9, 2)))
    w2 = _leaf(rng, 9, 2, 2)
    return (lambda: spatial_deform(x, offsets, w2)), [x, offsets, w2]


def _build_deformable_mixer(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 1, 4, 4, 8, low=-2.0, high=2.0)
    p = init_deformable_mixer(rng, 8, 4, depth=1, sampling_points=9)
    randomize_offsets(p, rng)
    block = p.blocks[0]
    wrt = [x, p.reduce.weight, block.channel_mix.weight, block.offset_weight]
    wrt.append(block.deform_weight)
    return (lambda: deformable_mixer_forward(x, p, MODE_TRAIN).tokens), wrt


def _build_mhsa(rng: np.random.Generator) -> Instance:
    q, k, v = _leaf(rng, 1, 3, 4), _leaf(rng, 1, 2, 4), _leaf(rng, 1, 2, 4)
    p = init_attention(rng, 4, 2)
    return (lambda: mhsa(q, k, v, p)), [q, k, v, p.query.weight, p.output.weight]


def _build_smlp(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, 1, 3, 4)
    p = init_smlp(rng, 4)
    return (lambda: smlp(x, p)), [x, p.linear.weight]


def _features(
    rng: np.random.Generator, tasks: int, hw: Tuple[int, int], c: int
) -> List[DeformedFeature]:
    return [
        DeformedFeature(_leaf(rng, 1, hw[0] * hw[1], c), hw) for _ in range(tasks)
    ]


def _build_task_interaction(rng: np.random.Generator) -> Instance:
    features = _features(rng, 2, (3, 3), 4)
    p = init_task_interaction(rng, 4, 2)
    wrt = [f.tokens for f in features] + [p.attention.key.weight]
    return (lambda: task_interaction(features, p).tokens), wrt


def _build_task_query(rng: np.random.Generator) -> Instance:
    (deformed,) = _features(rng, 1, (3, 3), 4)
    interacted = TaskInteractedFeature(_leaf(rng, 1, 18, 4), 2)
    p = init_task_query(rng, 4, 2)
    wrt = [deformed.tokens, interacted.tokens, p.attention.value.weight]
    return (lambda: task_query(deformed, interacted, p).map), wrt


def _build_decoder(rng: np.random.Generator) -> Instance:
    features = _features(rng, 2, (3, 3), 4)
    p = init_decoder(rng, 4, 2)
    assert p.query is not None

    def forward() -> Tensor:
        interacted = task_interaction(features, p.interaction)
        outs = [task_query(f, interacted, p.query).map for f in features]
        return concat(outs, axis=-1)

    return forward, [f.tokens for f in features] + [p.interaction.smlp.linear.weight]


def _build_head(rng: np.random.Generator) -> Instance:
    feat = TaskAwareFeature(_leaf(rng, 1, 2, 2, 4))
    spec = make_task_spec("semseg", 3)
    head = HeadParams(init_linear(rng, 4, 3))
    wrt = [feat.map, head.projection.weight]
    return (lambda: head_forward(feat, spec, head)), wrt


def _loss_builder(kind: str) -> Builder:
    def build(rng: np.random.Generator) -> Instance:
        if kind == "semseg":
            pred = _leaf(rng, 1, 3, 3, 4, low=-2.0, high=2.0)
            target = rng.integers(0, 4, size=(1, 3, 3))
            target[0, 0, 0] = 255
        elif kind == "depth":
            pred = _leaf(rng, 1, 3, 3, 1, low=0.5, high=1.5)
            target = pred.data[..., 0] + rng.choice([-1.0, 1.0], (1, 3, 3)) * 0.3
        else:
            pred = _away_from_zero(rng, 1, 3, 3, 3)
            target = rng.standard_normal((1, 3, 3, 3))
        return (lambda: task_loss(pred, target, kind)), [pred]

    return build


# Every differentiable operation, in dependency order
OP_CHECKS: Dict[str, Builder] = {
    "add": _binary(add),
    "sub": _binary(sub),
    "mul": _binary(mul),
    "div": _binary(div),
    "matmul": _build_matmul,
    "permute": _build_permute,
    "reshape": _build_reshape,
    "expand": _build_expand,
    "reduce_sum": _build_reduce_sum,
    "reduce_mean": _build_reduce_mean,
    "exp": _unary(exp),
    "log": _unary(log, positive=True),
    "sqrt": _unary(sqrt, positive=True),
    "abs": _unary(absolute),
    "softmax": _build_softmax,
    "log_softmax": _build_log_softmax,
    "concat": _build_concat,
    "stack": _build_stack,
    "getitem": _build_getitem,
    "pad": _build_pad,
    "linear": _build_linear,
    "layer_norm": _build_layer_norm,
    "batch_norm": _build_batch_norm,
    "gelu": _build_gelu,
    "pointwise_conv": _build_pointwise_conv,
    "conv2d": _build_conv2d,
    "bilinear_sample": _build_bilinear_sample,
    "upsample_bilinear": _build_upsample,
    "avg_pool": _build_avg_pool,
    "l2_normalize": _build_l2_normalize,
    "reduce_channels": _build_reduce_channels,
    "channel_mix": _build_channel_mix,
    "predict_offsets": _build_predict_offsets,
    "spatial_deform": _build_spatial_deform,
    "deformable_mixer": _build_deformable_mixer,
    "mhsa": _build_mhsa,
    "smlp": _build_smlp,
    "task_interaction": _build_task_interaction,
    "task_query": _build_task_query,
    "decoder": _build_decoder,
    "head": _build_head,
    "loss.semseg": _loss_builder("semseg"),
    "loss.depth": _loss_builder("depth"),
    "loss.normal": _loss_builder("normal"),
}


def check_op(
    name: str,
    rng: np.random.Generator,
    instances: int = 20,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckResult:
    builder = OP_CHECKS[name]
    worst = 0.0
    for _ in range(instances):
        fn, wrt = builder(rng)
        worst = max(worst, check_gradients(fn, wrt, rng, eps))
    return GradCheckResult(name, instances, worst, tolerance)


def gradcheck_model_config(seed: int = 0) -> ModelConfig:
    """Two tasks on 32x32 inputs with C' = 4."""
    return ModelConfig(
        tasks=[make_task_spec("semseg", 3), make_task_spec("depth")],
        input_hw=(32, 32),
        trunk_widths=(4, 4, 4, 4),
        depth_d=1,
        sampling_points=9,
        heads=2,
        seed=seed,
    )


def check_model(
    rng: np.random.Generator,
    seed: int = 0,
    eps: float = 1e-4,
    tolerance: float = 1e-4,
    param_fraction: float = 0.01,
) -> GradCheckResult:
    """Total-loss gradient of the whole model on a sampled share of parameters."""
    model = DemtModel(gradcheck_model_config(seed))
    for enc in model.params.encoders:
        randomize_offsets(enc, rng)
    config = model.config
    samples = [
        generate_scene((seed, i), config.input_hw[0], config.input_hw[1], 3)
        for i in range(2)
    ]
    batch = make_batch(samples, [0, 1])
    params = model.parameters()
    sizes = np.array([t.size for t in params])
    total = int(sizes.sum())
    count = max(1, int(round(param_fraction * total)))
    picks = rng.choice(total, size=count, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    indices: Dict[int, List[int]] = {}
    for flat in sorted(int(p) for p in picks):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        indices.setdefault(i, []).append(flat - int(offsets[i]))
    wrt_positions = sorted(indices)
    wrt = [params[i] for i in wrt_positions]
    remapped = {k: indices[i] for k, i in enumerate(wrt_positions)}

    def total_loss() -> Tensor:
        loss, _ = compute_losses(model, batch, MODE_TRAIN)
        return loss

    worst = check_gradients(total_loss, wrt, rng, eps, remapped)
    return GradCheckResult("model", len(picks), worst, tolerance)


def run_suite(
    seed: int = 0,
    instances: int = 20,
    eps: float = 1e-5,
    model_eps: float = 1e-4,
    tolerance: float = 1e-4,
    param_fraction: float = 0.01,
    ops: Optional[Sequence[str]] = None,
    include_model: bool = True,
) -> List[GradCheckResult]:
    """Run the per-op checks and the end-to-end model check."""
    rng = np.random.default_rng(seed)
    results = []
    for name in ops or list(OP_CHECKS):
        start = time.perf_counter()
        result = check_op(name, rng, instances, eps, tolerance)
        logger.info(
            f"gradcheck {name}: worst rel err {result.worst_rel_err:.3e} "
            f"({time.perf_counter() - start:.2f}s)"
        )
        results.append(result)
    if include_model:
        result = check_model(rng, seed, model_eps, tolerance, param_fraction)
        logger.info(f"gradcheck model: worst rel err {result.worst_rel_err:.3e}")
        results.append(result)
    return results


def format_suite(results: Sequence[GradCheckResult]) -> List[str]:
    lines = [r.format_line() for r in results]
    verdict = "PASS" if all(r.passed for r in results) else "FAIL"
    lines.append(f"result={verdict}")
    return lines


def ensure_passed(results: Sequence[GradCheckResult]) -> None:
    """Raise GradCheckFailure naming every failing op."""
    failed = [r.op for r in results if not r.passed]
    if failed:
        raise GradCheckFailure(f"gradient check failed for: {', '.join(failed)}")

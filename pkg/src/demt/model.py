"""End-to-end DeMT model: toy trunk, feature aggregation, task encoders, decoder,
prediction heads."""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from .config import (
    BN_EPS,
    BN_MOMENTUM,
    LN_EPS,
    MODE_EVAL,
    MODEL_MODES,
    STAGE_STRIDES,
    TASK_KINDS,
)
from .decoder import (
    DecoderParams,
    TaskAwareFeature,
    decoder_forward,
    init_decoder,
)
from .exceptions import ShapeError, ValidationError
from .logger import logger
from .mixer import (
    DeformableMixerParams,
    deformable_mixer_forward,
    init_deformable_mixer,
)
from .nn import (
    LinearParams,
    NormParams,
    avg_pool,
    batch_norm,
    conv2d,
    gelu,
    init_batch_norm,
    init_linear,
    l2_normalize,
    named_norms,
    named_tensors,
    pointwise_conv,
    uniform_weight,
    upsample_bilinear,
    zeros_parameter,
)
from .tensor import Array, Tensor, concat, no_grad

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"
SHARED_BRANCH = "shared"

TRUNK_KERNEL = 3
STEM_POOL = 4
STAGE_POOL = 2


@dataclass
class TaskSpec:
    """One dense prediction task and how it is scored."""

    name: str
    kind: str
    out_channels: int
    loss_weight: float = 1.0
    metric_direction: str = LOWER_BETTER

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValidationError(
                f"unknown task kind {self.kind!r}, expected one of {TASK_KINDS}"
            )
        if self.out_channels < 1:
            raise ValidationError(
                f"task {self.name} needs out_channels >= 1, got {self.out_channels}"
            )
        if self.loss_weight <= 0:
            raise ValidationError(
                f"task {self.name} needs a positive loss weight, got {self.loss_weight}"
            )
        if self.metric_direction not in (HIGHER_BETTER, LOWER_BETTER):
            raise ValidationError(
                f"unknown metric direction {self.metric_direction!r}"
            )


def make_task_spec(
    kind: str, num_classes: int = 5, loss_weight: float = 1.0
) -> TaskSpec:
    """Standard spec for a task kind: output channels and metric direction."""
    if kind == "semseg":
        return TaskSpec(kind, kind, num_classes, loss_weight, HIGHER_BETTER)
    if kind == "depth":
        return TaskSpec(kind, kind, 1, loss_weight, LOWER_BETTER)
    if kind == "normal":
        return TaskSpec(kind, kind, 3, loss_weight, LOWER_BETTER)
    raise ValidationError(f"unknown task kind {kind!r}, expected one of {TASK_KINDS}")


@dataclass
class ModelConfig:
    """Structural configuration of a model instance."""

    tasks: List[TaskSpec]
    input_hw: Tuple[int, int] = (64, 64)
    trunk_widths: Tuple[int, ...] = (8, 16, 24, 32)
    scales_used: Tuple[int, ...] = STAGE_STRIDES
    c_reduced: int = 0
    depth_d: int = 1
    sampling_points: int = 9
    heads: int = 2
    mode: str = "dm+ti+tq"
    seed: int = 0
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM
    ln_eps: float = LN_EPS

    def __post_init__(self) -> None:
        self.input_hw = tuple(self.input_hw)  # type: ignore[assignment]
        self.trunk_widths = tuple(self.trunk_widths)
        self.scales_used = tuple(self.scales_used)
        if not self.tasks:
            raise ValidationError("model needs at least one task")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ValidationError(f"task names must be unique, got {names}")
        h, w = self.input_hw
        if h % STAGE_STRIDES[-1] or w % STAGE_STRIDES[-1]:
            raise ValidationError(
                f"input {h}x{w} must be divisible by {STAGE_STRIDES[-1]}"
            )
        if len(self.trunk_widths) != len(STAGE_STRIDES) or min(self.trunk_widths) < 1:
            raise ValidationError(
                f"trunk_widths needs {len(STAGE_STRIDES)} positive ints, "
                f"got {self.trunk_widths}"
            )
        if not self.scales_used:
            raise ValidationError("scales_used must not be empty")
        unknown = [s for s in self.scales_used if s not in STAGE_STRIDES]
        if unknown:
            raise ValidationError(f"unknown scales {unknown}, expected {STAGE_STRIDES}")
        if STAGE_STRIDES[0] not in self.scales_used:
            raise ValidationError("scales_used must include stride 4")
        if self.mode not in MODEL_MODES:
            raise ValidationError(
                f"unknown model mode {self.mode!r}, expected one of {MODEL_MODES}"
            )
        if self.depth_d < 1:
            raise ValidationError(f"depth_d must be >= 1, got {self.depth_d}")
        if self.c_reduced < 0:
            raise ValidationError(f"c_reduced must be >= 0, got {self.c_reduced}")
        if self.reduced_channels % self.heads:
            raise ValidationError(
                f"heads ({self.heads}) must divide C' ({self.reduced_channels})"
            )

    @property
    def task_names(self) -> List[str]:
        return [t.name for t in self.tasks]

    @property
    def aggregated_channels(self) -> int:
        """C: sum of the widths of the used stages."""
        return sum(
            width
            for stride, width in zip(STAGE_STRIDES, self.trunk_widths)
            if stride in self.scales_used
        )

    @property
    def reduced_channels(self) -> int:
        """C': explicit, or C/4 (at least one channel)."""
        if self.c_reduced:
            return self.c_reduced
        return max(1, self.aggregated_channels // 4)

    @property
    def feature_hw(self) -> Tuple[int, int]:
        h, w = self.input_hw
        return h // STAGE_STRIDES[0], w // STAGE_STRIDES[0]

    @property
    def num_tokens(self) -> int:
        fh, fw = self.feature_hw
        return fh * fw


@dataclass
class ConvBlockParams:
    """conv2d(3x3) + GELU + BN."""

    weight: Tensor
    bias: Tensor
    bn: NormParams


@dataclass
class TrunkParams:
    stem: List[ConvBlockParams]
    stages: List[ConvBlockParams]


@dataclass
class HeadParams:
    projection: LinearParams


@dataclass
class ModelParams:
    trunk: TrunkParams
    encoders: List[DeformableMixerParams]
    decoder: Optional[DecoderParams]
    heads: List[HeadParams] = field(default_factory=list)


def _init_conv_block(
    rng: np.random.Generator, cin: int, cout: int, config: ModelConfig
) -> ConvBlockParams:
    fan_in = cin * TRUNK_KERNEL * TRUNK_KERNEL
    return ConvBlockParams(
        weight=uniform_weight(rng, (cout, TRUNK_KERNEL, TRUNK_KERNEL, cin), fan_in),
        bias=zeros_parameter((cout,)),
        bn=init_batch_norm(cout, config.bn_eps, config.bn_momentum),
    )


def init_trunk(rng: np.random.Generator, config: ModelConfig) -> TrunkParams:
    widths = config.trunk_widths
    stem = [
        _init_conv_block(rng, 3, widths[0], config),
        _init_conv_block(rng, widths[0], widths[0], config),
    ]
    stages = [_init_conv_block(rng, widths[0], widths[0], config)]
    for cin, cout in zip(widths[:-1], widths[1:]):
        stages.append(_init_conv_block(rng, cin, cout, config))
    return TrunkParams(stem=stem, stages=stages)


def init_model_params(config: ModelConfig) -> ModelParams:
    """Draw every parameter from one generator seeded with config.seed."""
    rng = np.random.default_rng(config.seed)
    trunk = init_trunk(rng, config)
    branches = 1 if config.mode == "baseline" else len(config.tasks)
    encoders = [
        init_deformable_mixer(
            rng,
            config.aggregated_channels,
            config.reduced_channels,
            config.depth_d,
            config.sampling_points,
            config.ln_eps,
            config.bn_eps,
            config.bn_momentum,
        )
        for _ in range(branches)
    ]
    decoder = None
    if config.mode in ("dm+ti", "dm+ti+tq"):
        decoder = init_decoder(
            rng,
            config.reduced_channels,
            config.heads,
            with_query=config.mode == "dm+ti+tq",
            ln_eps=config.ln_eps,
        )
    heads = [
        HeadParams(init_linear(rng, config.reduced_channels, task.out_channels))
        for task in config.tasks
    ]
    return ModelParams(trunk=trunk, encoders=encoders, decoder=decoder, heads=heads)


def _conv_block(x: Tensor, p: ConvBlockParams, mode: str) -> Tensor:
    return batch_norm(gelu(conv2d(x, p.weight, p.bias)), p.bn, mode)


def trunk_forward(image: Tensor, p: TrunkParams, mode: str) -> List[Tensor]:
    """Four feature maps at strides 4, 8, 16 and 32."""
    if image.ndim != 4 or image.shape[-1] != 3:
        raise ShapeError(f"trunk expects an image [B,H,W,3], got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    if h % STAGE_STRIDES[-1] or w % STAGE_STRIDES[-1]:
        raise ShapeError(f"input {h}x{w} must be divisible by {STAGE_STRIDES[-1]}")
    x = image
    for block in p.stem:
        x = _conv_block(x, block, mode)
    x = avg_pool(x, STEM_POOL)
    x = _conv_block(x, p.stages[0], mode)
    maps = [x]
    for block in p.stages[1:]:
        x = avg_pool(_conv_block(x, block, mode), STAGE_POOL)
        maps.append(x)
    return maps


def aggregate_features(stages: Sequence[Tensor], scales_used: Sequence[int]) -> Tensor:
    """Upsample the used stages to the stride-4 grid and concatenate in stride order."""
    if not scales_used:
        raise ValidationError("aggregate_features needs at least one scale")
    if STAGE_STRIDES[0] not in scales_used:
        raise ValidationError("aggregate_features needs the stride-4 stage")
    if len(stages) != len(STAGE_STRIDES):
        raise ShapeError(f"expected {len(STAGE_STRIDES)} stages, got {len(stages)}")
    target_h, target_w = stages[0].shape[1], stages[0].shape[2]
    picked = []
    for stride, stage in zip(STAGE_STRIDES, stages):
        if stride not in scales_used:
            continue
        if stage.shape[1:3] != (target_h, target_w):
            stage = upsample_bilinear(stage, target_h, target_w)
        picked.append(stage)
    return concat(picked, axis=-1)


def head_forward(
    feat: TaskAwareFeature,
    spec: TaskSpec,
    p: HeadParams,
    output_hw: Optional[Tuple[int, int]] = None,
) -> Tensor:
    """Pointwise projection to the task's channels, then x4 bilinear upsampling.

    Surface-normal outputs are normalised to unit length per pixel.
    """
    if p.projection.out_features != spec.out_channels:
        raise ShapeError(
            f"head for {spec.name} projects to {p.projection.out_features} "
            f"channels, task needs {spec.out_channels}"
        )
    x = pointwise_conv(feat.map, p.projection.weight, p.projection.bias)
    h, w = feat.spatial_shape
    out_h, out_w = output_hw or (h * STAGE_STRIDES[0], w * STAGE_STRIDES[0])
    x = upsample_bilinear(x, out_h, out_w)
    if spec.kind == "normal":
        x = l2_normalize(x)
    return x


def model_forward(
    image: Tensor,
    config: ModelConfig,
    params: ModelParams,
    mode: str,
    attention_sink: Optional[List[Array]] = None,
) -> Dict[str, Tensor]:
    """Full forward pass: one full-resolution prediction per task."""
    if image.shape[1:3] != config.input_hw:
        raise ShapeError(
            f"model built for {config.input_hw} inputs, got {image.shape[1:3]}"
        )
    stages = trunk_forward(image, params.trunk, mode)
    aggregated = aggregate_features(stages, config.scales_used)
    features = [
        deformable_mixer_forward(aggregated, enc, mode) for enc in params.encoders
    ]
    if config.mode == "baseline":
        shared = TaskAwareFeature(features[0].as_map())
        aware = [shared for _ in config.tasks]
    elif config.mode == "dm" or params.decoder is None:
        aware = [TaskAwareFeature(f.as_map()) for f in features]
    else:
        aware = decoder_forward(features, params.decoder, attention_sink)
    return {
        spec.name: head_forward(feat, spec, head, config.input_hw)
        for spec, feat, head in zip(config.tasks, aware, params.heads)
    }


class DemtModel:
    """Model parameters plus the bookkeeping training and ablations need.

    Parameters are partitioned into groups: `trunk`, `encoder.<task>` (or
    `encoder.shared` in baseline mode), `decoder` and `head.<task>`.
    """

    def __init__(self, config: ModelConfig, params: Optional[ModelParams] = None):
        self.config = config
        self.params = params or init_model_params(config)
        self.frozen: Set[str] = set()
        logger.debug(
            f"model built: mode={config.mode} C={config.aggregated_channels} "
            f"C'={config.reduced_channels} parameters={self.parameter_count()}"
        )

    def _groups(self) -> Iterator[Tuple[str, object]]:
        yield "trunk", self.params.trunk
        if self.config.mode == "baseline":
            yield f"encoder.{SHARED_BRANCH}", self.params.encoders[0]
        else:
            for name, enc in zip(self.config.task_names, self.params.encoders):
                yield f"encoder.{name}", enc
        if self.params.decoder is not None:
            yield "decoder", self.params.decoder
        for name, head in zip(self.config.task_names, self.params.heads):
            yield f"head.{name}", head

    def group_names(self) -> List[str]:
        return [name for name, _ in self._groups()]

    def parameter_groups(self) -> Dict[str, List[Tensor]]:
        return {
            name: [t for _, t in named_tensors(obj)] for name, obj in self._groups()
        }

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = []
        for group, obj in self._groups():
            named.extend(named_tensors(obj, group))
        return named

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> List[Tuple[str, NormParams]]:
        """Batch-norm layers, which own running statistics."""
        norms = []
        for group, obj in self._groups():
            norms.extend(
                (name, norm)
                for name, norm in named_norms(obj, group)
                if norm.running_mean is not None
            )
        return norms

    def buffer_state(self) -> Dict[str, Array]:
        state = {}
        for name, norm in self.named_buffers():
            state[f"{name}.running_mean"] = np.array(norm.running_mean)
            state[f"{name}.running_var"] = np.array(norm.running_var)
        return state

    def parameter_state(self) -> Dict[str, Array]:
        return {name: t.numpy() for name, t in self.named_parameters()}

    def load_state(
        self, parameters: Dict[str, Array], buffers: Dict[str, Array]
    ) -> None:
        """Overwrite parameters and running statistics by name.

        Raises:
            ValidationError: If a name is missing or unknown, or a shape differs
        """
        own = dict(self.named_parameters())
        own_buffers = self.buffer_state()
        self._check_names("parameter", set(own), set(parameters))
        self._check_names("buffer", set(own_buffers), set(buffers))
        for name, values in parameters.items():
            if tuple(np.shape(values)) != own[name].shape:
                raise ValidationError(
                    f"parameter {name} has shape {np.shape(values)}, "
                    f"expected {own[name].shape}"
                )
            own[name].update_(values)
        for name, norm in self.named_buffers():
            mean = np.asarray(buffers[f"{name}.running_mean"], dtype=np.float64)
            var = np.asarray(buffers[f"{name}.running_var"], dtype=np.float64)
            if mean.shape != (norm.channels,) or var.shape != (norm.channels,):
                raise ValidationError(f"buffer {name} does not match {norm.channels}")
            norm.running_mean = mean.copy()
            norm.running_var = var.copy()

    @staticmethod
    def _check_names(kind: str, expected: Set[str], given: Set[str]) -> None:
        missing = sorted(expected - given)
        unknown = sorted(given - expected)
        if missing or unknown:
            raise ValidationError(
                f"{kind} names differ: missing {missing[:3]}, unknown {unknown[:3]}"
            )

    def _resolve_group(self, group: str) -> List[str]:
        names = [
            name
            for name in self.group_names()
            if name == group or name.startswith(f"{group}.")
        ]
        if not names:
            raise ValidationError(
                f"unknown parameter group {group!r}, expected one of "
                f"{self.group_names()}"
            )
        return names

    def freeze(self, group: str) -> None:
        """Stop a group (or every group under a prefix) from receiving gradients."""
        groups = self.parameter_groups()
        for name in self._resolve_group(group):
            for t in groups[name]:
                t.requires_grad = False
                t.grad = None
            self.frozen.add(name)
        logger.info(f"Froze parameter group(s) {group}")

    def unfreeze(self, group: str) -> None:
        groups = self.parameter_groups()
        for name in self._resolve_group(group):
            for t in groups[name]:
                t.requires_grad = True
            self.frozen.discard(name)
        logger.info(f"Unfroze parameter group(s) {group}")

    def parameter_count(self, group: Optional[str] = None) -> int:
        if group is None:
            return sum(t.size for t in self.parameters())
        groups = self.parameter_groups()
        return sum(t.size for name in self._resolve_group(group) for t in groups[name])

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def forward(
        self,
        image: Tensor,
        mode: str,
        attention_sink: Optional[List[Array]] = None,
    ) -> Dict[str, Tensor]:
        return model_forward(image, self.config, self.params, mode, attention_sink)

    def predict(self, image: Array) -> Dict[str, Array]:
        """Eval-mode predictions as arrays, without recording gradients."""
        with no_grad():
            outputs = self.forward(Tensor(image), MODE_EVAL)
        return {name: out.numpy() for name, out in outputs.items()}

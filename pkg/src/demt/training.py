"""Task losses, the weighted multi-task objective, SGD and the training loop."""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .config import (
    CHECKPOINT_FILE,
    CHECKPOINT_STEP_PATTERN,
    CHECKPOINT_VERSION,
    IGNORE_LABEL,
    MODE_TRAIN,
    TRAIN_LOG_FILE,
)
from .dataset import Batch, Sample, batch_iter
from .exceptions import MetricError, OptimizerError, ShapeError, ValidationError
from .logger import logger
from .model import DemtModel
from .nn import l2_normalize
from .tensor import Array, Tensor, absolute, backward, log_softmax, reduce_sum, reshape


@dataclass
class LossReport:
    """Per-task losses and their weighted total as plain floats."""

    per_task: Dict[str, float]
    total: float

    def format_line(self, step: int) -> str:
        """`step=<k> total=<loss> <task>=<loss> ...` in task order."""
        parts = [f"step={step}", f"total={self.total:.10f}"]
        parts.extend(f"{name}={value:.10f}" for name, value in self.per_task.items())
        return " ".join(parts)


def _semseg_loss(pred: Tensor, target: Array) -> Tensor:
    b, h, w, classes = pred.shape
    labels = np.asarray(target).astype(np.int64)
    valid = labels != IGNORE_LABEL
    count = int(valid.sum())
    if count == 0:
        raise MetricError("semseg loss: every pixel carries the ignore label")
    if labels[valid].min() < 0 or labels[valid].max() >= classes:
        raise ValidationError(f"semseg labels must lie in [0, {classes}) or be 255")
    weights = np.zeros((b, h, w, classes))
    bi, yi, xi = np.nonzero(valid)
    weights[bi, yi, xi, labels[valid]] = -1.0 / count
    return reduce_sum(log_softmax(pred, axis=-1) * Tensor(weights))


def _depth_loss(pred: Tensor, target: Array) -> Tensor:
    depth = np.asarray(target, dtype=np.float64)
    valid = depth > 0
    count = int(valid.sum())
    if count == 0:
        raise MetricError("depth loss: no valid depth pixels")
    flat = reshape(pred, depth.shape)
    diff = absolute(flat - Tensor(depth))
    return reduce_sum(diff * Tensor(valid / count))


def _normal_loss(pred: Tensor, target: Array) -> Tensor:
    normal = np.asarray(target, dtype=np.float64)
    length = np.linalg.norm(normal, axis=-1)
    valid = length > 0
    count = int(valid.sum())
    if count == 0:
        raise MetricError("normal loss: no valid normal pixels")
    unit = np.zeros_like(normal)
    unit[valid] = normal[valid] / length[valid][:, None]
    cosine = reduce_sum(l2_normalize(pred) * Tensor(unit), axis=-1)
    return reduce_sum((1.0 - cosine) * Tensor(valid / count))


def task_loss(pred: Tensor, target: Array, kind: str) -> Tensor:
    """Scalar loss of one task's prediction against its target map.

    Args:
        pred: Prediction [B, H, W, C]
        target: semseg class map [B, H, W] (255 ignored), depth [B, H, W]
            (valid where > 0) or normals [B, H, W, 3] (valid where non-zero)
        kind: One of semseg, depth, normal

    Raises:
        ShapeError: If prediction and target extents disagree
        MetricError: If no pixel is valid
    """
    target = np.asarray(target)
    if pred.ndim != 4 or pred.shape[:3] != target.shape[:3]:
        raise ShapeError(
            f"{kind} loss: prediction {pred.shape} vs target {target.shape}"
        )
    if kind == "semseg":
        return _semseg_loss(pred, target)
    if kind == "depth":
        if pred.shape[-1] != 1 or target.ndim != 3:
            raise ShapeError(
                f"depth loss expects [B,H,W,1] vs [B,H,W], got {pred.shape}"
            )
        return _depth_loss(pred, target)
    if kind == "normal":
        if pred.shape != target.shape:
            raise ShapeError(f"normal loss: {pred.shape} vs {target.shape}")
        return _normal_loss(pred, target)
    raise ValidationError(f"unknown task kind {kind!r}")


def total_loss(per_task: Mapping[str, Tensor], alphas: Mapping[str, float]) -> Tensor:
    """Weighted sum of task losses in task order."""
    if set(per_task) != set(alphas):
        raise ValidationError(
            f"loss weights {sorted(alphas)} do not match tasks {sorted(per_task)}"
        )
    total: Optional[Tensor] = None
    for name, loss in per_task.items():
        term = loss * float(alphas[name])
        total = term if total is None else total + term
    assert total is not None
    return total


def compute_losses(
    model: DemtModel, batch: Batch, mode: str = MODE_TRAIN
) -> Tuple[Tensor, LossReport]:
    """Forward a batch and score every task."""
    return score_outputs(model, model.forward(Tensor(batch.images), mode), batch)


def score_outputs(
    model: DemtModel, outputs: Dict[str, Tensor], batch: Batch
) -> Tuple[Tensor, LossReport]:
    """Per-task losses and their weighted total for outputs already computed."""
    per_task = {
        spec.name: task_loss(outputs[spec.name], batch.target(spec.kind), spec.kind)
        for spec in model.config.tasks
    }
    alphas = {spec.name: spec.loss_weight for spec in model.config.tasks}
    total = total_loss(per_task, alphas)
    report = LossReport({k: v.item() for k, v in per_task.items()}, total.item())
    return total, report


def sgd_step(
    params: Sequence[Tuple[str, Tensor]],
    lr: float,
    weight_decay: float,
    momentum: float,
    velocity: Dict[str, Array],
) -> None:
    """One momentum SGD update: v = mu*v + g + wd*theta; theta -= lr*v.

    Tensors that do not require gradients are skipped. Gradients are cleared.

    Raises:
        OptimizerError: If a trainable tensor has no gradient
    """
    for name, t in params:
        if not t.requires_grad:
            continue
        if t.grad is None:
            raise OptimizerError(f"parameter {name} has no gradient")
    for name, t in params:
        if not t.requires_grad:
            continue
        assert t.grad is not None
        v = velocity.get(name)
        step = t.grad + weight_decay * t.data
        v = step if v is None else momentum * v + step
        velocity[name] = v
        t.update_(t.data - lr * v)
        t.grad = None


class SGD:
    """Momentum SGD with L2 weight decay over named parameters."""

    def __init__(
        self,
        named_params: Sequence[Tuple[str, Tensor]],
        lr: float = 1e-3,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
    ):
        if lr < 0 or weight_decay < 0 or not 0 <= momentum < 1:
            raise ValidationError(
                f"invalid SGD settings lr={lr} momentum={momentum} wd={weight_decay}"
            )
        self.named_params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, Array] = {}

    def step(self) -> None:
        sgd_step(
            self.named_params, self.lr, self.weight_decay, self.momentum, self.velocity
        )

    def zero_grad(self) -> None:
        for _, t in self.named_params:
            t.zero_grad()

    def state(self) -> Dict[str, Array]:
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state(self, velocity: Mapping[str, Array]) -> None:
        known = {name for name, _ in self.named_params}
        unknown = sorted(set(velocity) - known)
        if unknown:
            raise ValidationError(f"velocity for unknown parameters {unknown[:3]}")
        self.velocity = {
            name: np.array(v, dtype=np.float64) for name, v in velocity.items()
        }


class Trainer:
    """Seeded training loop with a per-step text log and periodic checkpoints.

    The data stream position (epoch, batch index) and the shuffle seed fully
    determine which batch comes next, so a resumed run replays the same stream.
    """

    def __init__(
        self,
        model: DemtModel,
        samples: Sequence[Sample],
        out_dir: str,
        train_config: Mapping[str, float],
        shuffle_seed: int = 0,
        config_text: str = "",
    ):
        if not samples:
            raise ValidationError("training needs at least one sample")
        self.model = model
        self.samples = list(samples)
        self.out_dir = Path(out_dir)
        self.batch_size = int(train_config["batch_size"])
        self.ckpt_every = int(train_config["ckpt_every"])
        self.log_every = int(train_config["log_every"])
        self.shuffle_seed = shuffle_seed
        self.config_text = config_text
        self.optimizer = SGD(
            model.named_parameters(),
            lr=float(train_config["lr"]),
            momentum=float(train_config["momentum"]),
            weight_decay=float(train_config["weight_decay"]),
        )
        self.step = 0
        self.epoch = 0
        self.batch_index = 0
        self._batches: Optional[List[Batch]] = None

    @property
    def log_path(self) -> Path:
        return self.out_dir / TRAIN_LOG_FILE

    def resume(self, checkpoint: Checkpoint) -> None:
        """Restore parameters, statistics, velocity, step and stream position."""
        self.model.load_state(checkpoint.parameters, checkpoint.buffers)
        self.optimizer.load_state(checkpoint.velocity)
        seed, epoch, batch_index = (int(v) for v in checkpoint.rng)
        self.shuffle_seed = seed
        self.epoch = epoch
        self.batch_index = batch_index
        self.step = checkpoint.step
        self._batches = None
        logger.info(f"Resumed training at step {self.step} (epoch {epoch})")

    def _next_batch(self) -> Batch:
        if self._batches is None:
            self._batches = batch_iter(
                self.samples, self.batch_size, self.shuffle_seed, self.epoch
            )
        if self.batch_index >= len(self._batches):
            self.epoch += 1
            self.batch_index = 0
            self._batches = batch_iter(
                self.samples, self.batch_size, self.shuffle_seed, self.epoch
            )
        batch = self._batches[self.batch_index]
        self.batch_index += 1
        return batch

    def train_step(self) -> LossReport:
        batch = self._next_batch()
        total, report = compute_losses(self.model, batch, MODE_TRAIN)
        backward(total)
        self.optimizer.step()
        self.step += 1
        return report

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            version=CHECKPOINT_VERSION,
            config_text=self.config_text,
            step=self.step,
            parameters=self.model.parameter_state(),
            buffers=self.model.buffer_state(),
            velocity=self.optimizer.state(),
            rng=np.array(
                [self.shuffle_seed, self.epoch, self.batch_index], dtype=np.float64
            ),
        )

    def save(self, name: Optional[str] = None) -> Path:
        path = self.out_dir / (name or CHECKPOINT_FILE)
        save_checkpoint(path, self.checkpoint())
        return path

    def run(self, steps: int) -> List[LossReport]:
        """Train until `steps` total steps, appending one log line per step."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        reports = []
        with open(self.log_path, "a", encoding="utf-8") as log:
            while self.step < steps:
                report = self.train_step()
                reports.append(report)
                log.write(report.format_line(self.step) + "\n")
                if self.step % self.log_every == 0:
                    logger.info(f"step {self.step}/{steps} total={report.total:.6f}")
                if self.step % self.ckpt_every == 0:
                    log.flush()
                    self.save(CHECKPOINT_STEP_PATTERN % self.step)
        path = self.save()
        logger.info(f"Training finished at step {self.step}, checkpoint {path}")
        return reports
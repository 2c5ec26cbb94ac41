"""Evaluation metrics, multi-task relative performance and metric reports."""

import re
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .config import IGNORE_LABEL
from .exceptions import MetricError, ValidationError

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"

# Direction of every metric kind a report may carry
METRIC_DIRECTIONS: Dict[str, str] = {
    "miou": HIGHER_BETTER,
    "rmse": LOWER_BETTER,
    "merr": LOWER_BETTER,
    "odsf": HIGHER_BETTER,
    "maxf": HIGHER_BETTER,
}

# Metric reported for each task kind
TASK_METRICS: Dict[str, str] = {
    "semseg": "miou",
    "depth": "rmse",
    "normal": "merr",
}

_REPORT_LINE = re.compile(r"^task=(\S+) metric=(\S+) value=(\S+)$")


@dataclass(frozen=True)
class MetricEntry:
    task: str
    metric: str
    value: float

    @property
    def direction(self) -> str:
        return METRIC_DIRECTIONS[self.metric]

    @property
    def key(self) -> Tuple[str, str]:
        return self.task, self.metric


@dataclass
class MetricRecord:
    """Ordered metric values of one model, each with its direction."""

    entries: List[MetricEntry] = field(default_factory=list)

    def add(self, task: str, metric: str, value: float) -> None:
        if metric not in METRIC_DIRECTIONS:
            raise ValidationError(
                f"unknown metric {metric!r}, "
                f"expected one of {sorted(METRIC_DIRECTIONS)}"
            )
        self.entries.append(MetricEntry(task, metric, float(value)))

    def as_dict(self) -> Dict[Tuple[str, str], float]:
        return {e.key: e.value for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)


def miou(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = IGNORE_LABEL
) -> float:
    """Mean IoU over the classes present in ground truth or prediction.

    Raises:
        ValidationError: If num_classes < 1 or shapes differ
        MetricError: If every pixel is ignored
    """
    if num_classes < 1:
        raise ValidationError(f"num_classes must be >= 1, got {num_classes}")
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValidationError(f"miou shape mismatch: {pred.shape} vs {gt.shape}")
    valid = gt != ignore
    if not valid.any():
        raise MetricError("miou: every pixel carries the ignore label")
    p = pred[valid]
    g = gt[valid]
    if p.min() < 0 or p.max() >= num_classes or g.min() < 0 or g.max() >= num_classes:
        raise ValidationError(f"miou labels must lie in [0, {num_classes})")
    confusion = np.bincount(
        g * num_classes + p, minlength=num_classes * num_classes
    ).reshape(num_classes, num_classes)
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    present = union > 0
    return float(np.mean(tp[present] / union[present]))


def rmse_depth(pred: np.ndarray, gt: np.ndarray) -> float:
    """Root mean square error over pixels with positive ground-truth depth.

    Raises:
        MetricError: If no pixel has a valid depth
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"rmse shape mismatch: {pred.shape} vs {gt.shape}")
    valid = gt > 0
    if not valid.any():
        raise MetricError("rmse: no valid depth pixels")
    diff = pred[valid] - gt[valid]
    return float(np.sqrt(np.mean(diff * diff)))


def mean_angular_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean angle in degrees between predicted and ground-truth normals.

    Both fields are normalised first; zero-length ground-truth vectors are skipped.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValidationError(
            f"normal fields must match [...,3]: {pred.shape}, {gt.shape}"
        )
    gt_norm = np.linalg.norm(gt, axis=-1)
    valid = gt_norm > 0
    if not valid.any():
        raise MetricError("mErr: no valid normal pixels")
    pred_norm = np.linalg.norm(pred, axis=-1)
    p = pred[valid] / np.maximum(pred_norm[valid], 1e-12)[:, None]
    g = gt[valid] / gt_norm[valid][:, None]
    cos = np.clip(np.sum(p * g, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def relative_gains(multi: MetricRecord, single: MetricRecord) -> Dict[str, float]:
    """Signed relative change in percent per entry; positive means better.

    Keys are `<task>` when the task has one metric, else `<task>.<metric>`.

    Raises:
        MetricError: If the entry sets differ or a reference value is zero
    """
    multi_values = multi.as_dict()
    single_values = single.as_dict()
    if set(multi_values) != set(single_values):
        raise MetricError(
            f"metric sets differ: {sorted(multi_values)} vs {sorted(single_values)}"
        )
    per_task: Dict[str, int] = {}
    for task, _ in multi_values:
        per_task[task] = per_task.get(task, 0) + 1
    gains = {}
    for entry in multi.entries:
        reference = single_values[entry.key]
        if reference == 0:
            raise MetricError(f"reference value for {entry.task}/{entry.metric} is 0")
        if entry.direction == LOWER_BETTER:
            change = (reference - entry.value) / reference
        else:
            change = (entry.value - reference) / reference
        name = entry.task
        if per_task[entry.task] > 1:
            name = f"{entry.task}.{entry.metric}"
        gains[name] = 100.0 * change
    return gains


def delta_m(multi: MetricRecord, single: MetricRecord) -> float:
    """Average signed relative change (percent) against single-task references."""
    gains = relative_gains(multi, single)
    return float(np.mean(list(gains.values())))


def format_report(record: MetricRecord) -> List[str]:
    return [
        f"task={e.task} metric={e.metric} value={e.value:.6f}" for e in record.entries
    ]


def parse_report(text: str) -> MetricRecord:
    """Read the `task=... metric=... value=...` lines of a report.

    Other lines (delta_m, gains, blanks) are ignored.

    Raises:
        MetricError: If a metric line is malformed
    """
    record = MetricRecord()
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line.startswith("task="):
            continue
        match = _REPORT_LINE.match(line)
        if match is None:
            raise MetricError(f"line {line_no}: malformed metric line {line!r}")
        task, metric, raw = match.groups()
        try:
            record.add(task, metric, float(raw))
        except (ValueError, ValidationError) as e:
            raise MetricError(f"line {line_no}: {e}") from e
    return record

"""Task losses, evaluation metrics and the relative multi-task score."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from medusa import ops
from medusa.errors import InvalidArgumentError, InvalidShapeError, UndefinedMetricError
from medusa.tasks import LossKind, MetricKind, TaskSpec
from medusa.tensor import Tensor

IGNORE_INDEX = 255

l1_loss = ops.l1_loss
cross_entropy = ops.cross_entropy
weighted_bce = ops.weighted_bce


def task_loss(task: TaskSpec, pred: Tensor, target: np.ndarray) -> Tensor:
    if task.loss_kind is LossKind.L1:
        return ops.l1_loss(pred, target)
    if task.loss_kind is LossKind.CROSS_ENTROPY:
        return ops.cross_entropy(pred, target, IGNORE_INDEX)
    return ops.weighted_bce(pred, target, task.pos_weight)


def rmse(pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray | None = None) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidShapeError(f"rmse: {pred.shape} vs {gt.shape}")
    if valid_mask is None:
        valid_mask = np.ones(gt.shape, dtype=bool)
    if not valid_mask.any():
        raise UndefinedMetricError("rmse: no valid pixels")
    err = (pred - gt)[valid_mask]
    return float(np.sqrt(np.mean(err * err)))


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """num_classes x num_classes count matrix, rows = ground truth."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise InvalidShapeError("confusion: prediction and ground truth differ in size")
    keep = gt != ignore_index
    return np.bincount(
        gt[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64), minlength=num_classes**2
    ).reshape(num_classes, num_classes)


def miou_from_confusion(conf: np.ndarray) -> float:
    if conf.sum() == 0:
        raise UndefinedMetricError("miou: every pixel is ignored")
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    present = union > 0
    return float(np.mean(inter[present] / union[present]))


def miou(pred_labels, gt_labels, num_classes: int, ignore_index: int = IGNORE_INDEX) -> float:
    """Mean IoU over classes that appear in the ground truth or the prediction."""
    return miou_from_confusion(confusion(pred_labels, gt_labels, num_classes, ignore_index))


def bce_error(logits: np.ndarray, target: np.ndarray, pos_weight: float) -> float:
    return float(ops.weighted_bce(Tensor(logits), target, pos_weight).data)


@dataclass(frozen=True)
class TaskPerformance:
    task: TaskSpec
    value: float


@dataclass
class MtlDelta:
    per_task_relative: list[float]
    aggregate: float
    tasks: list[str] = field(default_factory=list)

    @property
    def percent(self) -> float:
        return 100.0 * self.aggregate


def delta_mtl(multitask: list[TaskPerformance], baseline: list[TaskPerformance]) -> MtlDelta:
    """Mean relative change against single-task baselines, sign-flipped for lower-is-better tasks."""
    if not multitask or len(multitask) != len(baseline):
        raise InvalidArgumentError("delta_mtl: task lists must be non-empty and of equal length")
    terms = []
    for m, b in zip(multitask, baseline):
        if m.task.name != b.task.name or m.task.lower_is_better != b.task.lower_is_better:
            raise InvalidArgumentError(f"delta_mtl: task mismatch {m.task.name} vs {b.task.name}")
        if b.value == 0:
            raise ZeroDivisionError(f"delta_mtl: baseline value for {b.task.name} is zero")
        sign = -1.0 if m.task.lower_is_better else 1.0
        terms.append(sign * (m.value - b.value) / b.value)
    return MtlDelta(terms, sum(terms) / len(terms), [m.task.name for m in multitask])


# ------------------------------------------------------------------ reports


def metrics_csv(perfs: list[TaskPerformance], config_hash: str, delta: MtlDelta | None = None) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "metric_kind", "value"])
    for p in perfs:
        w.writerow([p.task.name, p.task.metric_kind.value, repr(p.value)])
    if delta is not None:
        for name, term in zip(delta.tasks, delta.per_task_relative):
            w.writerow([name, "DELTA_MTL_TERM", repr(term)])
        w.writerow(["all", "DELTA_MTL", repr(delta.aggregate)])
    return buf.getvalue()


def read_metrics_csv(text: str) -> dict[str, tuple[str, float]]:
    rows = csv.DictReader(line for line in text.splitlines() if not line.startswith("#"))
    return {r["task"]: (r["metric_kind"], float(r["value"])) for r in rows if r["metric_kind"] in MetricKind.__members__}

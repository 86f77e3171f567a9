"""Task identities: output channels, loss and metric kinds."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from medusa.errors import InvalidArgumentError


class LossKind(str, Enum):
    L1 = "L1"
    CROSS_ENTROPY = "CROSS_ENTROPY"
    WEIGHTED_BCE = "WEIGHTED_BCE"


class MetricKind(str, Enum):
    RMSE = "RMSE"
    MIOU = "MIOU"
    BCE_ERROR = "BCE_ERROR"


_LOWER_IS_BETTER = {MetricKind.RMSE: True, MetricKind.MIOU: False, MetricKind.BCE_ERROR: True}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    out_channels: int
    loss_kind: LossKind
    metric_kind: MetricKind
    lower_is_better: bool
    pos_weight: float = 0.95
    # which label map of a Sample supervises this task
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "metric_kind", MetricKind(self.metric_kind))
        if not self.label:
            object.__setattr__(self, "label", self.name)
        if self.out_channels < 1:
            raise InvalidArgumentError(f"{self.name}: out_channels must be >= 1")
        if self.lower_is_better != _LOWER_IS_BETTER[self.metric_kind]:
            raise InvalidArgumentError(f"{self.name}: lower_is_better inconsistent with {self.metric_kind.value}")
        if self.loss_kind is LossKind.CROSS_ENTROPY and self.out_channels < 2:
            raise InvalidArgumentError(f"{self.name}: cross-entropy needs at least 2 classes")

    @property
    def num_classes(self) -> int:
        """Classes scored by mIoU; single-channel tasks are binary."""
        return 2 if self.out_channels == 1 else self.out_channels

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "out_channels": self.out_channels,
            "loss_kind": self.loss_kind.value,
            "metric_kind": self.metric_kind.value,
            "lower_is_better": self.lower_is_better,
            "pos_weight": self.pos_weight,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


NUM_CLASSES = 5  # background + 4 shape classes
NUM_PARTS = 2 * NUM_CLASSES - 1

TASKS: dict[str, TaskSpec] = {
    "depth": TaskSpec("depth", 1, LossKind.L1, MetricKind.RMSE, True),
    "segm": TaskSpec("segm", NUM_CLASSES, LossKind.CROSS_ENTROPY, MetricKind.MIOU, False, label="segmentation"),
    "normals": TaskSpec("normals", 3, LossKind.L1, MetricKind.RMSE, True),
    "edges": TaskSpec("edges", 1, LossKind.WEIGHTED_BCE, MetricKind.BCE_ERROR, True, pos_weight=0.95),
    "saliency": TaskSpec("saliency", 1, LossKind.WEIGHTED_BCE, MetricKind.MIOU, False, pos_weight=0.5),
    "parts": TaskSpec("parts", NUM_PARTS, LossKind.CROSS_ENTROPY, MetricKind.MIOU, False),
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def parse_tasks(text: str) -> list[TaskSpec]:
    names = [n.strip() for n in text.split(",") if n.strip()]
    if not names:
        raise InvalidArgumentError("task roster is empty")
    if len(set(names)) != len(names):
        raise InvalidArgumentError(f"duplicate task in roster {names}")
    return [get_task(n) for n in names]

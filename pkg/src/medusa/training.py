"""Joint multi-task optimization and the freeze-and-extend transfer protocol."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from medusa import ops
from medusa.data import Batch
from medusa.errors import InvalidArgumentError, InvalidDataError, InvalidStateError, TrainingDivergedError
from medusa.heads import HeadKind, MedusaModel
from medusa.metrics import (
    IGNORE_INDEX,
    TaskPerformance,
    bce_error,
    confusion,
    miou_from_confusion,
    task_loss,
)
from medusa.tasks import MetricKind, TaskSpec
from medusa.tensor import Parameter, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = 1e-4
    backbone_lr_scale: float = 0.1
    poly_power: float = 0.9
    batch_size: int = 8
    seed: int = 0
    intermediate_loss_weight: float = 1.0
    task_loss_weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("epochs and batch_size must be positive")
        if self.base_lr <= 0 or self.poly_power <= 0:
            raise InvalidArgumentError("base_lr and poly_power must be positive")
        if self.backbone_lr_scale < 0 or self.intermediate_loss_weight < 0:
            raise InvalidArgumentError("backbone_lr_scale and intermediate_loss_weight must be non-negative")
        if any(w < 0 for w in self.task_loss_weights.values()):
            raise InvalidArgumentError("task loss weights must be non-negative")

    def weight(self, task: str) -> float:
        return self.task_loss_weights.get(task, 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    """Adam moments keyed by parameter name plus per-name learning-rate scale."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    base_lr: float = 1e-4
    lr_scale: dict[str, float] = field(default_factory=dict)


def poly_lr(step: int, total_steps: int, base_lr: float, power: float) -> float:
    if total_steps <= 0:
        raise InvalidArgumentError("poly_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise InvalidArgumentError(f"poly_lr: step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps) ** power


def adam_step(params: list[Parameter], state: OptimState, lr_t: float) -> None:
    """One bias-corrected Adam update; frozen parameters are skipped untouched."""
    b1, b2 = ADAM_BETAS
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p in params:
        if p.frozen:
            continue
        if p.grad is None:
            raise InvalidStateError(f"parameter {p.name or '<unnamed>'} has no gradient")
        g = p.grad
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        m, v = state.m[p.name], state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = lr_t * state.lr_scale.get(p.name, 1.0)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# -------------------------------------------------------------- evaluation


class _MetricAccumulator:
    def __init__(self, task: TaskSpec):
        self.task = task
        self.sq = 0.0
        self.count = 0
        self.bce_sum = 0.0
        self.conf = np.zeros((task.num_classes, task.num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, target: np.ndarray) -> None:
        kind = self.task.metric_kind
        if kind is MetricKind.RMSE:
            d = pred - target
            self.sq += float((d * d).sum())
            self.count += d.size
        elif kind is MetricKind.BCE_ERROR:
            self.bce_sum += bce_error(pred, target, self.task.pos_weight) * pred.size
            self.count += pred.size
        else:
            labels = (pred[:, 0] > 0).astype(np.int64) if self.task.out_channels == 1 else pred.argmax(axis=1)
            gt = target[:, 0].astype(np.int64) if self.task.out_channels == 1 else target
            self.conf += confusion(labels, gt, self.task.num_classes, IGNORE_INDEX)

    def value(self) -> float:
        kind = self.task.metric_kind
        if kind is MetricKind.RMSE:
            return math.sqrt(self.sq / self.count)
        if kind is MetricKind.BCE_ERROR:
            return self.bce_sum / self.count
        return miou_from_confusion(self.conf)


def _targets(batch: Batch, task: TaskSpec) -> np.ndarray:
    if task.label not in batch.arrays:
        raise InvalidDataError(f"batch carries no {task.label!r} labels for task {task.name}")
    return batch[task.label]


def evaluate(model: MedusaModel, tasks: list[TaskSpec], data: Batch, batch_size: int = 16) -> dict[str, tuple[float, float]]:
    """Mean loss and split-level metric per task, in eval mode."""
    was_training = model.training
    model.eval()
    accs = {t.name: _MetricAccumulator(t) for t in tasks}
    loss_sum = {t.name: 0.0 for t in tasks}
    with no_grad():
        for start in range(0, len(data), batch_size):
            chunk = data.subset(slice(start, start + batch_size))
            out = model(Tensor(chunk["image"]), [t.name for t in tasks], intermediate=False)
            for t in tasks:
                target = _targets(chunk, t)
                pred = out[t.name].final
                loss_sum[t.name] += float(task_loss(t, pred, target).data) * len(chunk)
                accs[t.name].update(pred.data, target)
    model.train(was_training)
    return {t.name: (loss_sum[t.name] / len(data), accs[t.name].value()) for t in tasks}


def performances(model: MedusaModel, tasks: list[TaskSpec], data: Batch) -> list[TaskPerformance]:
    res = evaluate(model, tasks, data)
    return [TaskPerformance(t, res[t.name][1]) for t in tasks]


# ------------------------------------------------------------------ training


@dataclass
class TrainReport:
    """Rows of (epoch, task, split, loss, metric); metric is NaN where not evaluated."""

    rows: list[tuple[int, str, str, float, float]] = field(default_factory=list)

    def add(self, epoch: int, task: str, split: str, loss: float, metric: float = float("nan")) -> None:
        self.rows.append((epoch, task, split, float(loss), float(metric)))

    def losses(self, task: str, split: str = "train") -> list[float]:
        return [r[3] for r in self.rows if r[1] == task and r[2] == split]

    def final_metrics(self, split: str = "val") -> dict[str, float]:
        out = {}
        for epoch, task, sp, _, metric in self.rows:
            if sp == split and not math.isnan(metric):
                out[task] = metric
        return out

    def to_csv(self, config_hash: str = "") -> str:
        buf = io.StringIO()
        buf.write(f"# config_hash={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "task", "split", "loss", "metric"])
        for epoch, task, split, loss, metric in self.rows:
            w.writerow([epoch, task, split, repr(loss), "" if math.isnan(metric) else repr(metric)])
        return buf.getvalue()

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrainReport):
            return NotImplemented
        return self.to_csv() == other.to_csv()


def _lr_scales(model: MedusaModel, config: TrainConfig) -> dict[str, float]:
    return {name: config.backbone_lr_scale for name, _ in model.backbone.named_parameters("backbone.")}


def _task_total(task: TaskSpec, out, target: np.ndarray, config: TrainConfig) -> tuple[Tensor, Tensor]:
    final_loss = task_loss(task, out.final, target)
    term = final_loss
    if out.initial and config.intermediate_loss_weight > 0:
        inter = ops.add_all([task_loss(task, p, target) for p in out.initial])
        term = ops.add(final_loss, ops.scale(inter, config.intermediate_loss_weight))
    return ops.scale(term, config.weight(task.name)), final_loss


def train_multitask(
    model: MedusaModel,
    tasks: list[TaskSpec],
    train_data: Batch,
    config: TrainConfig,
    val_data: Batch | None = None,
    eval_every: int = 0,
) -> TrainReport:
    """Jointly train the named heads (and any unfrozen backbone) on ``train_data``.

    Per step the objective is the weighted sum over tasks of the final-prediction
    loss plus ``intermediate_loss_weight`` times the per-scale initial-prediction
    losses. The learning rate follows a polynomial decay; backbone parameters use
    ``backbone_lr_scale`` times that rate.
    """
    if not tasks:
        raise InvalidArgumentError("no tasks to train")
    for t in tasks:
        if t.name not in model.heads:
            raise InvalidArgumentError(f"model has no head for task {t.name}")
        _targets(train_data, t)
    names = [t.name for t in tasks]
    use_inter = config.intermediate_loss_weight > 0
    # without intermediate supervision the per-scale prediction convs are off the tape
    params = [
        p
        for n, p in model.named_parameters()
        if not p.frozen and _belongs(n, names) and (use_inter or ".init_pred." not in n)
    ]
    state = OptimState(base_lr=config.base_lr, lr_scale=_lr_scales(model, config))
    n = len(train_data)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    report = TrainReport()
    model.train()
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 7919, epoch]).permutation(n)
        sums = {t.name: 0.0 for t in tasks}
        for start in range(0, n, config.batch_size):
            rows = np.sort(order[start : start + config.batch_size])
            batch = train_data.subset(rows)
            for p in params:
                p.grad = None
            out = model(Tensor(batch["image"]), names, intermediate=use_inter)
            terms = []
            for t in tasks:
                term, final_loss = _task_total(t, out[t.name], _targets(batch, t), config)
                terms.append(term)
                sums[t.name] += float(final_loss.data) * len(batch)
            loss = ops.add_all(terms)
            value = float(loss.data)
            if not math.isfinite(value):
                detail = ", ".join(f"{t.name}={float(x.data):.4g}" for t, x in zip(tasks, terms))
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}: {detail}")
            backward(loss)
            adam_step(params, state, poly_lr(step, total_steps, config.base_lr, config.poly_power))
            step += 1
        for t in tasks:
            report.add(epoch, t.name, "train", sums[t.name] / n)
        last = epoch == config.epochs - 1
        if val_data is not None and (last or (eval_every and (epoch + 1) % eval_every == 0)):
            for name, (vloss, metric) in evaluate(model, tasks, val_data).items():
                report.add(epoch, name, "val", vloss, metric)
        logger.info("epoch %d: %s", epoch, {k: round(v / n, 5) for k, v in sums.items()})
    return report


def _belongs(param_name: str, task_names: list[str]) -> bool:
    if param_name.startswith("backbone."):
        return True
    return any(param_name.startswith(f"head.{t}.") for t in task_names)


def freeze_backbone(model: MedusaModel) -> None:
    """Freeze the shared backbone and every head currently attached."""
    model.backbone.freeze()
    for head in model.heads.values():
        head.freeze()


def attach_and_train_head(
    model: MedusaModel,
    new_task: TaskSpec,
    train_data: Batch,
    config: TrainConfig,
    val_data: Batch | None = None,
    head_kind: HeadKind | str = HeadKind.MSA,
    sfa: bool = True,
) -> TrainReport:
    """Add a head for ``new_task`` on the frozen backbone and train it alone."""
    if not all(p.frozen for p in model.backbone.parameters()):
        raise InvalidStateError("freeze the backbone before attaching a transfer head")
    model.add_head(new_task, head_kind, sfa)
    return train_multitask(model, [new_task], train_data, config, val_data)

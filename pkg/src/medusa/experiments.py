"""End-to-end experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from medusa import archive
from medusa.backbone import BackboneConfig
from medusa.config import ExperimentConfig
from medusa.data import Batch, SceneSpec, dataset
from medusa.errors import CheckpointVersionError, InvalidArgumentError, InvalidStateError
from medusa.heads import HeadKind, MedusaModel, attention_param_count, head_param_count
from medusa.metrics import TaskPerformance, delta_mtl, metrics_csv, read_metrics_csv
from medusa.tasks import TaskSpec, get_task
from medusa.training import (
    TrainConfig,
    TrainReport,
    attach_and_train_head,
    freeze_backbone,
    performances,
    train_multitask,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "medusa-checkpoint"
CHECKPOINT_VERSION = 1


# -------------------------------------------------------------- data / model


@lru_cache(maxsize=4)
def _load_splits(scene: SceneSpec, n_train: int, n_val: int, n_test: int) -> dict[str, Batch]:
    ds = dataset(scene, n_train, n_val, n_test)
    return {name: ds.load(name) for name in ("train", "val", "test")}


def load_splits(cfg: ExperimentConfig) -> dict[str, Batch]:
    return _load_splits(cfg.scene, cfg.n_train, cfg.n_val, cfg.n_test)


def build_model(
    cfg: ExperimentConfig, seed: int, roster: list[str] | None = None, head: str | None = None, sfa: bool | None = None
) -> MedusaModel:
    model = MedusaModel(cfg.backbone, seed=seed, gate=cfg.gate)
    for name in roster or cfg.tasks:
        kind = HeadKind(head) if head else cfg.head_kind(name)
        model.add_head(get_task(name), kind, cfg.sfa if sfa is None else sfa)
    return model


# --------------------------------------------------------------- checkpoints


def checkpoint_meta(model: MedusaModel, cfg: ExperimentConfig, seed: int) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "gate": model.gate,
        "backbone": asdict(model.config),
        "heads": [
            {"task": h.task.to_dict(), "head_kind": h.head_kind.value, "sfa": h.sfa_enabled} for h in model.heads.values()
        ],
        "experiment": cfg.to_dict(),
    }


def save_checkpoint(path: str | Path, model: MedusaModel, cfg: ExperimentConfig, seed: int) -> None:
    archive.save(path, model.state(), checkpoint_meta(model, cfg, seed))


def model_from_checkpoint(path: str | Path) -> tuple[MedusaModel, dict]:
    arrays, meta = archive.load(path)
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, "
            f"found {meta.get('format')} v{meta.get('version')}"
        )
    bb = meta["backbone"]
    config = BackboneConfig(tuple(bb["scales"]), tuple(bb["channels"]), bb["stem_channels"], bb["blocks_per_scale"])
    model = MedusaModel(config, seed=meta["seed"], gate=meta["gate"])
    for h in meta["heads"]:
        model.add_head(TaskSpec.from_dict(h["task"]), h["head_kind"], h["sfa"])
    expected = model.state()
    if set(expected) != set(arrays):
        missing = sorted(set(expected) ^ set(arrays))[:5]
        raise CheckpointVersionError(f"{path}: parameter set does not match its manifest ({missing} ...)")
    try:
        model.load_state(arrays)
    except ValueError as exc:
        raise CheckpointVersionError(f"{path}: {exc}") from exc
    return model, meta


def experiment_from_meta(meta: dict) -> ExperimentConfig:
    d = dict(meta["experiment"])
    d["train"] = TrainConfig(**d["train"])
    bb = d["backbone"]
    d["backbone"] = BackboneConfig(tuple(bb["scales"]), tuple(bb["channels"]), bb["stem_channels"], bb["blocks_per_scale"])
    d["scene"] = SceneSpec(**d["scene"])
    return ExperimentConfig(**d)


def checkpoint_config(path: str | Path) -> ExperimentConfig:
    """The experiment config embedded in a checkpoint."""
    _, meta = archive.load(path)
    if "experiment" not in meta:
        raise CheckpointVersionError(f"{path}: no embedded experiment config")
    return experiment_from_meta(meta)


# ------------------------------------------------------------------ locking


@contextlib.contextmanager
def locked(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".medusa.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise InvalidStateError(f"another experiment is writing to {out_dir}") from None
    try:
        yield
    finally:
        lock.release()


# ----------------------------------------------------------------- commands


@dataclass
class RunArtifacts:
    directory: Path
    checkpoint: Path
    report: Path
    metrics: Path


def _run_dir(cfg: ExperimentConfig, suffix: str = "") -> Path:
    return Path(cfg.out) / (cfg.name + suffix)


def cmd_train(cfg: ExperimentConfig) -> RunArtifacts:
    """Train the configured roster jointly and write checkpoint, report and metrics."""
    out = _run_dir(cfg)
    seed = cfg.train.seed
    with locked(Path(cfg.out)):
        splits = load_splits(cfg)
        model = build_model(cfg, seed)
        tasks = model.tasks
        report = train_multitask(model, tasks, splits["train"], cfg.train, splits["val"])
        arts = RunArtifacts(out, out / "checkpoint.mda", out / "report.csv", out / "metrics_val.csv")
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(arts.checkpoint, model, cfg, seed)
        arts.report.write_text(report.to_csv(cfg.config_hash()))
        arts.metrics.write_text(metrics_csv(performances(model, tasks, splits["val"]), cfg.config_hash()))
    return arts


def _baseline_perfs(paths: list[str | Path], tasks: list[TaskSpec]) -> list[TaskPerformance]:
    values: dict[str, float] = {}
    for p in paths:
        values.update({k: v for k, (_, v) in read_metrics_csv(Path(p).read_text()).items()})
    missing = [t.name for t in tasks if t.name not in values]
    if missing:
        raise InvalidArgumentError(f"baseline metrics missing for {missing}")
    return [TaskPerformance(t, values[t.name]) for t in tasks]


def cmd_eval(checkpoint: str | Path, split: str = "val", baselines: list[str | Path] | None = None) -> str:
    """Metrics CSV for every head of a checkpoint, plus delta-MTL when baselines are given."""
    model, meta = model_from_checkpoint(checkpoint)
    cfg = experiment_from_meta(meta)
    data = load_splits(cfg)
    if split not in data:
        raise InvalidArgumentError(f"unknown split {split!r}")
    tasks = model.tasks
    perfs = performances(model, tasks, data[split])
    delta = None
    if baselines:
        scored = [p for p in perfs if p.task.name in cfg.eval_tasks] or perfs
        delta = delta_mtl(scored, _baseline_perfs(baselines, [p.task for p in scored]))
    return metrics_csv(perfs, cfg.config_hash(), delta)


@dataclass
class TransferResult:
    artifacts: RunArtifacts
    prior_before: dict[str, float]
    prior_after: dict[str, float]
    new_metric: float


def cmd_transfer(checkpoint: str | Path, new_task: str, cfg: ExperimentConfig | None = None) -> TransferResult:
    """Freeze a trained model, attach a head for ``new_task`` and train only that head."""
    model, meta = model_from_checkpoint(checkpoint)
    source_cfg = experiment_from_meta(meta)
    cfg = cfg or source_cfg
    task = get_task(new_task)
    if task.name in model.heads:
        raise InvalidArgumentError(f"checkpoint already has a {task.name!r} head")
    # the frozen backbone must see the same data distribution it was trained on
    cfg = replace(cfg, scene=source_cfg.scene, n_train=source_cfg.n_train, n_val=source_cfg.n_val, n_test=source_cfg.n_test)
    splits = load_splits(cfg)
    prior = model.tasks
    before = {p.task.name: p.value for p in performances(model, prior, splits["val"])}
    freeze_backbone(model)
    report = attach_and_train_head(
        model, task, splits["train"], cfg.train, splits["val"], cfg.head_kind(task.name), cfg.sfa
    )
    after = {p.task.name: p.value for p in performances(model, prior, splits["val"])}
    new_metric = performances(model, [task], splits["val"])[0].value
    out = Path(cfg.out) / f"{cfg.name}_{task.name}"
    cfg = replace(cfg, tasks=[t.name for t in model.tasks])
    with locked(Path(cfg.out)):
        arts = RunArtifacts(out, out / "checkpoint.mda", out / "report.csv", out / "metrics_val.csv")
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(arts.checkpoint, model, cfg, meta["seed"])
        arts.report.write_text(report.to_csv(cfg.config_hash()))
        arts.metrics.write_text(metrics_csv(performances(model, model.tasks, splits["val"]), cfg.config_hash()))
    return TransferResult(arts, before, after, new_metric)


# ---------------------------------------------------------------- resources


def resource_table(config: BackboneConfig, task: TaskSpec, head_kind: str, max_tasks: int) -> tuple[list[tuple[int, int, int, int]], int | None]:
    """Parameter counts versus task count for independent heads, separate networks, and a pairwise model.

    The pairwise column is a stylized stand-in for decoders that connect every
    ordered task pair: one spatial-attention block per scale per pair.
    """
    if max_tasks < 1:
        raise InvalidArgumentError("max_tasks must be >= 1")
    backbone = MedusaModel(config).backbone.num_parameters()
    head = head_param_count(config, task, head_kind)
    pair = attention_param_count(config)
    rows = []
    crossover = None
    for t in range(1, max_tasks + 1):
        medusa = backbone + t * head
        st = t * (backbone + head)
        pairwise = backbone + t * head + t * (t - 1) * pair
        rows.append((t, medusa, st, pairwise))
        if crossover is None and pairwise > st:
            crossover = t
    if crossover is None:
        # closed form: pairwise > st  <=>  t * pair > backbone  (t > 1)
        crossover = max(2, backbone // pair + 1)
    return rows, crossover


def cmd_resources(cfg: ExperimentConfig, max_tasks: int | None = None) -> str:
    max_tasks = cfg.max_tasks if max_tasks is None else max_tasks
    task = get_task(cfg.tasks[0])
    rows, crossover = resource_table(cfg.backbone, task, cfg.head_kind(task.name), max_tasks)
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.config_hash()}\n")
    buf.write("# params_pairwise: stylized all-pairs attention model, not a reimplementation of any published decoder\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T", "params_medusa", "params_st", "params_pairwise"])
    w.writerows(rows)
    buf.write(f"# crossover_T={crossover}\n")
    return buf.getvalue()


# --------------------------------------------------------- multi-run studies

ABLATION_CELLS = (("msa", True), ("msa", False), ("hrhead", True), ("hrhead", False))
# single-task baselines use the plain head: no attention anywhere
BASELINE_HEAD = ("hrhead", False)


def _run_key(cfg: ExperimentConfig, roster: list[str], head: str, sfa: bool, seed: int) -> str:
    blob = json.dumps(
        {
            "roster": roster,
            "head": head,
            "sfa": sfa,
            "seed": seed,
            "gate": cfg.gate,
            "train": asdict(replace(cfg.train, seed=seed)),
            "backbone": asdict(cfg.backbone),
            "scene": asdict(cfg.scene),
            "sizes": [cfg.n_train, cfg.n_val, cfg.n_test],
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_or_load(cfg: ExperimentConfig, roster: list[str], head: str, sfa: bool, seed: int) -> MedusaModel:
    """Train a model for (roster, head, sfa, seed), reusing a cached checkpoint under ``cfg.out``."""
    path = Path(cfg.out) / "cache" / f"{'+'.join(roster)}_{head}_{'sfa' if sfa else 'conv'}_s{seed}_{_run_key(cfg, roster, head, sfa, seed)}.mda"
    if path.exists():
        return model_from_checkpoint(path)[0]
    splits = load_splits(cfg)
    model = build_model(cfg, seed, roster, head, sfa)
    train_multitask(model, model.tasks, splits["train"], replace(cfg.train, seed=seed))
    save_checkpoint(path, model, replace(cfg, tasks=list(roster), head=head, sfa=sfa), seed)
    return model


@dataclass
class AblationResult:
    # (seed, cell label) -> delta-MTL aggregate
    deltas: dict[tuple[int, str], float]
    metrics: dict[tuple[int, str], dict[str, float]]

    def mean(self, cell: str) -> float:
        vals = [v for (_, c), v in self.deltas.items() if c == cell]
        return float(np.mean(vals))

    def to_csv(self, config_hash: str) -> str:
        buf = io.StringIO()
        buf.write(f"# config_hash={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "cell", "task", "value"])
        for (seed, cell), metrics in self.metrics.items():
            for task, value in metrics.items():
                w.writerow([seed, cell, task, repr(value)])
        for (seed, cell), value in self.deltas.items():
            w.writerow([seed, cell, "delta_mtl", repr(value)])
        for cell in dict.fromkeys(c for _, c in self.deltas):
            w.writerow(["mean", cell, "delta_mtl", repr(self.mean(cell))])
        return buf.getvalue()


def cell_label(head: str, sfa: bool) -> str:
    return f"{head}+{'sfa' if sfa else 'conv'}"


def run_ablation(cfg: ExperimentConfig, seeds: list[int] | None = None) -> AblationResult:
    """Delta-MTL of each (head kind, SFA) cell against per-task single-task baselines."""
    seeds = cfg.seeds if seeds is None else seeds
    val = load_splits(cfg)["val"]
    eval_tasks = [get_task(t) for t in cfg.eval_tasks]
    deltas, metrics = {}, {}
    for seed in seeds:
        baseline = []
        for t in eval_tasks:
            model = train_or_load(cfg, [t.name], *BASELINE_HEAD, seed)
            baseline += performances(model, [t], val)
        metrics[(seed, "single_task")] = {p.task.name: p.value for p in baseline}
        for head, sfa in ABLATION_CELLS:
            model = train_or_load(cfg, cfg.tasks, head, sfa, seed)
            perfs = performances(model, eval_tasks, val)
            label = cell_label(head, sfa)
            metrics[(seed, label)] = {p.task.name: p.value for p in perfs}
            deltas[(seed, label)] = delta_mtl(perfs, baseline).aggregate
            logger.info("seed %d %s: delta %.4f", seed, label, deltas[(seed, label)])
    return AblationResult(deltas, metrics)


@dataclass
class UflResult:
    # (seed, source roster label, transfer task) -> metric
    metrics: dict[tuple[int, str, str], float]

    def mean(self, source: str, task: str) -> float:
        return float(np.mean([v for (_, s, t), v in self.metrics.items() if s == source and t == task]))

    def to_csv(self, config_hash: str) -> str:
        buf = io.StringIO()
        buf.write(f"# config_hash={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "source", "task", "metric"])
        for (seed, source, task), value in self.metrics.items():
            w.writerow([seed, source, task, repr(value)])
        return buf.getvalue()


def run_ufl(cfg: ExperimentConfig, seeds: list[int] | None = None) -> UflResult:
    """Freeze backbones trained on each source roster and fit new heads for the transfer tasks."""
    seeds = cfg.seeds if seeds is None else seeds
    rosters = cfg.source_rosters or [cfg.tasks]
    splits = load_splits(cfg)
    out = {}
    for seed in seeds:
        for roster in rosters:
            label = "+".join(roster)
            for name in cfg.transfer_tasks:
                model = train_or_load(cfg, roster, cfg.head, cfg.sfa, seed)
                freeze_backbone(model)
                task = get_task(name)
                attach_and_train_head(model, task, splits["train"], replace(cfg.train, seed=seed), None, cfg.head_kind(name), cfg.sfa)
                out[(seed, label, name)] = performances(model, [task], splits["val"])[0].value
                logger.info("seed %d source %s -> %s: %.4f", seed, label, name, out[(seed, label, name)])
    return UflResult(out)

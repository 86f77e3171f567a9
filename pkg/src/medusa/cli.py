"""``medusa`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from medusa import experiments
from medusa.config import SCENARIOS, ExperimentConfig, load_config
from medusa.errors import MedusaError
from medusa.training import TrainConfig

logger = logging.getLogger("medusa")


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file, or a packaged scenario name")
    p.add_argument("--tasks", help="comma-separated task roster")
    p.add_argument("--head", choices=["msa", "hrhead"])
    p.add_argument("--sfa", type=_on_off, metavar="{on,off}")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    for f in fields(TrainConfig):
        if f.name in ("seed", "task_loss_weights"):
            continue
        p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), dest=f.name)


def build_config(args: argparse.Namespace, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Config file (or ``base``, or defaults) with command-line overrides applied."""
    cfg = load_config(args.config) if args.config else base or ExperimentConfig()
    updates = {}
    if args.tasks:
        updates["tasks"] = [t.strip() for t in args.tasks.split(",") if t.strip()]
        updates["eval_tasks"] = [t for t in cfg.eval_tasks if t in updates["tasks"]] or updates["tasks"]
    if args.head:
        updates["head"] = args.head
    if args.sfa is not None:
        updates["sfa"] = args.sfa
    if args.out:
        updates["out"] = args.out
    train = {f.name: getattr(args, f.name) for f in fields(TrainConfig) if getattr(args, f.name, None) is not None}
    if args.seed is not None:
        train["seed"] = args.seed
        updates["seeds"] = [args.seed]
    return replace(cfg, **updates, train=replace(cfg.train, **train))


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    sys.stdout.write(text)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="medusa", description="Multi-scale attention multi-task models on synthetic scenes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a task roster jointly")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--baseline", action="append", default=[], help="single-task metrics CSV (repeatable)")
    p.add_argument("--output", help="also write the CSV here")

    p = sub.add_parser("transfer", help="freeze a checkpoint and train a new head")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, help="task for the new head")

    p = sub.add_parser("resources", help="parameter counts versus task count")
    _add_common(p)
    p.add_argument("--max-tasks", type=int)
    p.add_argument("--output", help="also write the CSV here")

    p = sub.add_parser("run", help="run a packaged scenario or config end to end")
    _add_common(p)
    p.add_argument("scenario", nargs="?", help=f"one of {', '.join(SCENARIOS)}")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    try:
        if args.command == "train":
            arts = experiments.cmd_train(build_config(args))
            sys.stdout.write(arts.report.read_text())
        elif args.command == "eval":
            _emit(experiments.cmd_eval(args.checkpoint, args.split, args.baseline), args.output)
        elif args.command == "transfer":
            cfg = build_config(args, experiments.checkpoint_config(args.checkpoint))
            result = experiments.cmd_transfer(args.checkpoint, args.task, cfg)
            sys.stdout.write(result.artifacts.metrics.read_text())
        elif args.command == "resources":
            _emit(experiments.cmd_resources(build_config(args), args.max_tasks), args.output)
        elif args.command == "run":
            if args.scenario and not args.config:
                args.config = args.scenario
            sys.stdout.write(run_scenario(build_config(args)))
    except (MedusaError, OSError, ZeroDivisionError) as exc:
        print(f"medusa: error: {exc}", file=sys.stderr)
        return 2
    return 0


def run_scenario(cfg: ExperimentConfig) -> str:
    """Dispatch on the config kind and write the resulting CSV under ``cfg.out``."""
    if cfg.kind == "train":
        return experiments.cmd_train(cfg).report.read_text()
    with experiments.locked(Path(cfg.out)):
        if cfg.kind == "resources":
            text = experiments.cmd_resources(cfg)
        elif cfg.kind == "ablation":
            text = experiments.run_ablation(cfg).to_csv(cfg.config_hash())
        else:
            text = experiments.run_ufl(cfg).to_csv(cfg.config_hash())
        (Path(cfg.out) / f"{cfg.name}.csv").write_text(text)
    return text


if __name__ == "__main__":
    sys.exit(main())

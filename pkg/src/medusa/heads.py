"""Independent per-task heads and the full multi-task model.

A head gates each backbone scale with its own spatial attention, refines the
result with two residual blocks, emits an initial prediction per scale
(training only) and fuses the scales either with per-scale attention (MSA) or
by plain upsample-and-concatenate (HRHead).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

from medusa import ops
from medusa.backbone import Backbone, BackboneConfig, ScalePyramid
from medusa.errors import InvalidArgumentError, InvalidShapeError, InvalidStateError
from medusa.nn import Conv2d, ConvBlock, Module, ResidualBlock, SpatialAttention
from medusa.tasks import TaskSpec
from medusa.tensor import Tensor


class HeadKind(str, Enum):
    MSA = "msa"
    HRHEAD = "hrhead"


@dataclass
class HeadOutput:
    final: Tensor
    initial: list[Tensor] | None = None


def head_rng(seed: int, name: str) -> np.random.Generator:
    # seeded from the task name so a head's init never depends on its siblings
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class TaskHead(Module):
    def __init__(
        self,
        config: BackboneConfig,
        task: TaskSpec,
        head_kind: HeadKind | str,
        rng: np.random.Generator,
        sfa: bool = True,
        gate: str = "literal",
    ):
        super().__init__()
        self.config = config
        self.task = task
        self.head_kind = HeadKind(head_kind)
        self.sfa_enabled = sfa
        out = task.out_channels
        self.sfa = Module()
        self.refine1 = Module()
        self.refine2 = Module()
        self.init_pred = Module()
        if self.head_kind is HeadKind.MSA:
            self.msa = Module()
        for s, c in enumerate(config.channels):
            key = f"scale{s}"
            # ablation: without SFA the gate is replaced by a plain conv block
            self.sfa.add_child(key, SpatialAttention(c, rng, gate) if sfa else ConvBlock(c, c, 3, rng))
            self.refine1.add_child(key, ResidualBlock(c, rng))
            self.refine2.add_child(key, ResidualBlock(c, rng))
            self.init_pred.add_child(key, Conv2d(c, out, 1, rng))
            if self.head_kind is HeadKind.MSA:
                self.msa.add_child(key, SpatialAttention(c, rng, gate))
        self.final_conv = Conv2d(sum(config.channels), out, 1, rng)

    def _check(self, feats: list[Tensor]) -> None:
        if len(feats) != len(self.config.channels):
            raise InvalidShapeError(f"expected {len(self.config.channels)} scales, got {len(feats)}")
        for f, c in zip(feats, self.config.channels):
            if f.ndim != 4 or f.shape[1] != c:
                raise InvalidShapeError(f"scale feature {f.shape} does not have {c} channels")

    def apply_sfa(self, pyramid: ScalePyramid | list[Tensor]) -> list[Tensor]:
        feats = list(pyramid)
        self._check(feats)
        return [block(f) for block, f in zip(self.sfa._children.values(), feats)]

    def refine(self, task_feats: list[Tensor]) -> list[Tensor]:
        self._check(task_feats)
        r1 = self.refine1._children.values()
        r2 = self.refine2._children.values()
        return [b2(b1(f)) for b1, b2, f in zip(r1, r2, task_feats)]

    def initial_predict(self, refined: list[Tensor]) -> list[Tensor]:
        """Per-scale predictions, upsampled to label resolution."""
        return [
            ops.upsample_bilinear(conv(f), scale)
            for conv, f, scale in zip(self.init_pred._children.values(), refined, self.config.scales)
        ]

    def _fuse(self, per_scale: list[Tensor]) -> Tensor:
        base = self.config.scales[0]
        ups = [ops.upsample_bilinear(f, s // base) for f, s in zip(per_scale, self.config.scales)]
        fused = self.final_conv(ops.concat_channels(ups))
        return ops.upsample_bilinear(fused, base)

    def msa_combine(self, refined: list[Tensor]) -> Tensor:
        if self.head_kind is not HeadKind.MSA:
            raise InvalidStateError(f"head {self.task.name} is {self.head_kind.value}, not msa")
        attended = [att(f) for att, f in zip(self.msa._children.values(), refined)]
        return self._fuse(attended)

    def hrhead_combine(self, refined: list[Tensor]) -> Tensor:
        if self.head_kind is not HeadKind.HRHEAD:
            raise InvalidStateError(f"head {self.task.name} is {self.head_kind.value}, not hrhead")
        return self._fuse(refined)

    def __call__(self, pyramid: ScalePyramid | list[Tensor], intermediate: bool | None = None) -> HeadOutput:
        """Run the head. Initial predictions are produced only in training mode."""
        if intermediate is None:
            intermediate = self.training
        refined = self.refine(self.apply_sfa(pyramid))
        if self.head_kind is HeadKind.MSA:
            final = self.msa_combine(refined)
        else:
            final = self.hrhead_combine(refined)
        initial = self.initial_predict(refined) if intermediate else None
        return HeadOutput(final, initial)


def _conv_block_params(c_in: int, c_out: int, k: int) -> int:
    return c_out * c_in * k * k + c_out + 2 * c_out


def head_param_count(config: BackboneConfig, task: TaskSpec, head_kind: HeadKind | str, sfa: bool = True) -> int:
    """Closed-form number of learnable scalars in one task head."""
    head_kind = HeadKind(head_kind)
    out = task.out_channels
    attention = lambda c: _conv_block_params(c, c, 1) + _conv_block_params(c, c, 3)  # noqa: E731
    total = 0
    for c in config.channels:
        total += attention(c) if sfa else _conv_block_params(c, c, 3)
        total += 2 * _conv_block_params(c, c, 3)
        total += c * out + out
        if head_kind is HeadKind.MSA:
            total += attention(c)
    total += sum(config.channels) * out + out
    return total


def attention_param_count(config: BackboneConfig) -> int:
    """Parameters of one spatial-attention block at every scale."""
    return sum(_conv_block_params(c, c, 1) + _conv_block_params(c, c, 3) for c in config.channels)


class MedusaModel(Module):
    """Shared backbone plus a dictionary of independent task heads."""

    def __init__(self, config: BackboneConfig, seed: int = 0, gate: str = "literal"):
        super().__init__()
        self.config = config
        self.seed = seed
        self.gate = gate
        self.backbone = Backbone(config, np.random.default_rng([seed, 0]))
        self.head = Module()
        self.heads: dict[str, TaskHead] = {}

    def add_head(self, task: TaskSpec, head_kind: HeadKind | str = HeadKind.MSA, sfa: bool = True) -> TaskHead:
        if task.name in self.heads:
            raise InvalidArgumentError(f"a head named {task.name!r} already exists")
        head = TaskHead(self.config, task, head_kind, head_rng(self.seed, task.name), sfa=sfa, gate=self.gate)
        head.train(self.training)
        self.heads[task.name] = head
        self.head.add_child(task.name, head)
        return head

    @property
    def tasks(self) -> list[TaskSpec]:
        return [h.task for h in self.heads.values()]

    def __call__(self, image: Tensor, tasks: list[str] | None = None, intermediate: bool | None = None):
        pyramid = self.backbone(image)
        names = list(self.heads) if tasks is None else tasks
        return {n: self.heads[n](pyramid, intermediate) for n in names}

    def head_parameters(self, name: str) -> list[tuple[str, object]]:
        return list(self.heads[name].named_parameters(f"head.{name}."))

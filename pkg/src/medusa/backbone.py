"""Shared multi-resolution feature extractor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from medusa.errors import InvalidArgumentError, InvalidShapeError
from medusa.nn import ConvBlock, Module, ResidualBlock
from medusa.tensor import Tensor

PAPER_CHANNELS = (18, 36, 72, 144)


@dataclass(frozen=True)
class BackboneConfig:
    scales: tuple[int, ...] = (4, 8, 16, 32)
    channels: tuple[int, ...] = (8, 16, 32, 64)
    stem_channels: int = 8
    blocks_per_scale: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.scales or len(self.scales) != len(self.channels):
            raise InvalidArgumentError("scales and channels must be non-empty and of equal length")
        for s in self.scales:
            if s < 1 or s & (s - 1):
                raise InvalidArgumentError(f"scale {s} is not a power of two")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise InvalidArgumentError(f"scales must be strictly increasing, got {self.scales}")
        if min(self.channels) < 1 or self.stem_channels < 1 or self.blocks_per_scale < 0:
            raise InvalidArgumentError("channel and block counts must be positive")

    @classmethod
    def paper(cls) -> "BackboneConfig":
        return cls(channels=PAPER_CHANNELS, stem_channels=18)

    def check_input(self, height: int, width: int) -> None:
        top = self.scales[-1]
        if height % top or width % top:
            raise InvalidShapeError(f"input {height}x{width} is not divisible by the largest scale {top}")


@dataclass
class ScalePyramid:
    features: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> Tensor:
        return self.features[i]

    def __iter__(self):
        return iter(self.features)


class Backbone(Module):
    """Strided-conv stem down to the first scale, then one strided stage per further scale.

    Each stage ends with ``blocks_per_scale`` residual blocks and emits one
    pyramid level.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.stem = Module()
        n_down = config.scales[0].bit_length() - 1
        c_prev = 3
        for i in range(max(n_down, 1)):
            c_out = config.channels[0] if i == max(n_down, 1) - 1 else config.stem_channels
            stride = 2 if n_down else 1
            self.stem.add_child(f"conv{i}", ConvBlock(c_prev, c_out, 3, rng, stride=stride))
            c_prev = c_out
        self.stages = Module()
        for s, c in enumerate(config.channels):
            stage = Module()
            if s > 0:
                ratio = config.scales[s] // config.scales[s - 1]
                for i in range(ratio.bit_length() - 1):
                    stage.add_child(f"down{i}", ConvBlock(c_prev, c, 3, rng, stride=2))
                    c_prev = c
            for b in range(config.blocks_per_scale):
                stage.add_child(f"block{b}", ResidualBlock(c, rng))
            self.stages.add_child(f"scale{s}", stage)

    def __call__(self, image: Tensor) -> ScalePyramid:
        if image.ndim != 4 or image.shape[1] != 3:
            raise InvalidShapeError(f"backbone expects N x 3 x H x W images, got {image.shape}")
        self.config.check_input(image.shape[2], image.shape[3])
        x = image
        for block in self.stem._children.values():
            x = block(x)
        feats = []
        for stage in self.stages._children.values():
            for block in stage._children.values():
                x = block(x)
            feats.append(x)
        return ScalePyramid(feats)


def extract_features(image: Tensor, backbone: Backbone) -> ScalePyramid:
    return backbone(image)

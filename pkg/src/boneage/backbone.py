"""Small strided encoder producing a 16x down-sampled feature map.

Four stride-2 3x3 conv stages (2x, 4x, 8x, 16x). The 16x output is projected
to ``out_channels`` and smoothed by a 3x3 average pool; the 8x branch is
projected by a 1x1 conv, down-sampled 2x, and fused with the 16x path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv2d, Module
from .tensor import Tensor

DOWNSAMPLE = 16
FUSIONS = ("add", "concat")


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, int, int, int] = (8, 16, 32, 32)
    out_channels: int = 64
    fusion: str = "add"
    downsample: int = field(default=DOWNSAMPLE, init=False)

    def validate(self) -> None:
        if len(self.widths) != 4:
            raise ValueError(f"expected 4 stage widths, got {len(self.widths)}")
        if any(int(w) <= 0 for w in self.widths) or self.out_channels <= 0:
            raise ValueError(f"widths and out_channels must be positive: {self.widths}, {self.out_channels}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")


@dataclass
class FeatureMap:
    tensor: Tensor              # (batch, C, H/16, W/16)
    image_size: tuple[int, int]

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 2):
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, padding=1, bias=False)
        self.bn = BatchNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        w = config.widths
        C = config.out_channels
        self.stages = [ConvBNReLU(cin, cout, rng) for cin, cout in zip((1,) + tuple(w[:3]), w)]
        self.top_proj = Conv2d(w[3], C, 1, rng)
        self.lateral_proj = Conv2d(w[2], C, 1, rng)
        self.fuse = Conv2d(2 * C, C, 1, rng) if config.fusion == "concat" else None

    @property
    def out_channels(self) -> int:
        return self.config.out_channels

    def branch_strides(self) -> tuple[int, ...]:
        """Down-sampling factors of the branches that reach the output."""
        return (8, 16)

    def has_top_avg_pool(self) -> bool:
        return True

    def forward(self, images) -> FeatureMap:
        x = T.as_tensor(images)
        if x.ndim != 4 or x.shape[1] != 1:
            raise T.ShapeError("backbone", f"expected (batch, 1, H, W) images, got {x.shape}")
        H, W = x.shape[2:]
        if H % DOWNSAMPLE or W % DOWNSAMPLE:
            raise ValueError(f"image size {H}x{W} is not divisible by {DOWNSAMPLE}; resize the input first")
        h = x
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        top = T.avg_pool2d(self.top_proj(feats[3]), 3, stride=1, padding=1)
        lateral = T.avg_pool2d(self.lateral_proj(feats[2]), 2, stride=2)
        if self.fuse is None:
            out = top + lateral
        else:
            out = self.fuse(T.concat([top, lateral], axis=1))
        return FeatureMap(out, (H, W))


def build_backbone(config: BackboneConfig, seed: int) -> Backbone:
    return Backbone(config, np.random.default_rng(seed))


def forward_backbone(model: Backbone, images) -> FeatureMap:
    return model(images)

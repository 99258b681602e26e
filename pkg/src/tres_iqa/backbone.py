"""Small residual CNN producing four multi-scale feature maps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn import L2Pool, euclid_normalize


@dataclass
class BackboneConfig:
    channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    units_per_block: int = 1
    feature_dropout: float = 0.1
    pool_kernel: int = 5
    norm_eps: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ValueError(f"channels must be 4 positive ints, got {self.channels}")
        if self.units_per_block < 0:
            raise ValueError("units_per_block must be >= 0")
        if not 0.0 <= self.feature_dropout < 1.0:
            raise ValueError("feature_dropout must lie in [0, 1)")


class MultiScaleFeatures(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class ResidualUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.norm1 = nn.BatchNorm2d(channels)
        self.conv2 = conv3x3(channels, channels)
        self.norm2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + x)


class Block(nn.Module):
    """Stride-2 entry conv followed by residual units; halves the resolution."""

    def __init__(self, cin: int, cout: int, units: int):
        super().__init__()
        self.entry = conv3x3(cin, cout, stride=2)
        self.norm = nn.BatchNorm2d(cout)
        self.units = nn.Sequential(*[ResidualUnit(cout) for _ in range(units)])

    def forward(self, x):
        return self.units(F.relu(self.norm(self.entry(x))))


class Backbone(nn.Module):
    """Stem plus four blocks; the last layer of every block is tapped."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        c = self.config.channels
        self.stem = conv3x3(3, c[0])
        self.stem_norm = nn.BatchNorm2d(c[0])
        cins = (c[0],) + c[:3]
        self.blocks = nn.ModuleList(
            Block(cin, cout, self.config.units_per_block) for cin, cout in zip(cins, c)
        )

    def forward(self, image: torch.Tensor) -> MultiScaleFeatures:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"backbone expects (b, 3, H, W), got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"image height and width must be divisible by 16, got {h}x{w}")
        x = F.relu(self.stem_norm(self.stem(image)))
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return MultiScaleFeatures(*feats)


class FeatureFusion(nn.Module):
    """Normalize each scale, L2-pool it down to the coarsest grid, drop out, concatenate."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        self.pool = L2Pool(self.config.pool_kernel, stride=2)
        self.dropout = nn.Dropout(self.config.feature_dropout)

    @property
    def out_channels(self) -> int:
        return sum(self.config.channels)

    def forward(self, feats: MultiScaleFeatures) -> torch.Tensor:
        target = feats.f4.shape[-2:]
        out = []
        for i, f in enumerate(feats, start=1):
            f = euclid_normalize(f, self.config.norm_eps)
            for _ in range(_halvings(f.shape[-2:], target, i)):
                f = self.pool(f)
            out.append(self.dropout(f))
        return torch.cat(out, dim=1)


def _halvings(size, target, index) -> int:
    rh, rw = size[0] / target[0], size[1] / target[1]
    if rh != rw or rh < 1 or not float(rh).is_integer() or (int(rh) & (int(rh) - 1)):
        raise ValueError(
            f"feature map f{index} of size {tuple(size)} is not a power-of-two multiple of {tuple(target)}"
        )
    return int(math.log2(rh))


def rescale_and_concat(feats: MultiScaleFeatures, dropout: float = 0.0, training: bool = False,
                       pool_kernel: int = 5, eps: float = 1e-10) -> torch.Tensor:
    """Functional form of :class:`FeatureFusion`."""
    fusion = FeatureFusion(BackboneConfig(feature_dropout=dropout, pool_kernel=pool_kernel, norm_eps=eps))
    fusion.train(training)
    return fusion.to(feats.f4.device)(feats)

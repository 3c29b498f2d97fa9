import logging

import numpy as np

from autodiff.ops import merge, upsample_nearest
from autodiff.tensor import Tensor
from core.config import AsppConfig
from core.errors import ConfigurationError
from model.backbone import FeaturePyramid
from model.layers import ChannelGate, Conv2d, Module, conv1x1, conv3x3, leaky

logger = logging.getLogger(__name__)


class GatedLateral(Module):
    """1x1 projection to N channels followed by the tanh channel gate."""

    def __init__(self, cin: int, channels: int, rng: np.random.Generator):
        self.lateral = conv1x1(cin, channels, rng)
        self.gate = ChannelGate(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.gate(self.lateral(x))


class GatedFpn(Module):
    def __init__(
        self, in_channels: tuple[int, int, int], channels: int, rng: np.random.Generator
    ):
        self._in_channels = in_channels
        self.channels = channels
        self.p3 = GatedLateral(in_channels[0], channels, rng)
        self.p4 = GatedLateral(in_channels[1], channels, rng)
        self.p5 = GatedLateral(in_channels[2], channels, rng)

    def forward(self, pyr: FeaturePyramid) -> tuple[Tensor, Tensor, Tensor]:
        for expected, level in zip(self._in_channels, pyr.levels()):
            if level.shape[1] != expected:
                raise ConfigurationError(
                    f"gated fusion expects {expected} channels, got {level.shape[1]}"
                )
        p5 = self.p5(pyr.c5)
        p4 = merge([self.p4(pyr.c4), upsample_nearest(p5, 2)], "add")
        p3 = merge([self.p3(pyr.c3), upsample_nearest(p4, 2)], "add")
        return p3, p4, p5


class Aspp(Module):
    """Parallel (1x1, d=r1, d=r2, d=r3) branches, concatenated, projected back to N."""

    def __init__(self, channels: int, cfg: AsppConfig, rng: np.random.Generator):
        self.channels = channels
        b = cfg.branch_channels
        self.branches: list[Conv2d] = []
        if cfg.include_pointwise:
            self.branches.append(conv1x1(channels, b, rng))
        for rate in cfg.dilation_rates:
            self.branches.append(conv3x3(channels, b, rng, dilation=rate))
        self.project = conv1x1(b * len(self.branches), channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ConfigurationError(f"ASPP expects {self.channels} channels, got {x.shape[1]}")
        outs = [leaky(branch(x)) for branch in self.branches]
        return self.project(merge(outs, "concat_channels"))

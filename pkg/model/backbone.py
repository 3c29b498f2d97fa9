import logging
from dataclasses import dataclass

import numpy as np

from autodiff.ops import merge
from autodiff.tensor import Tensor
from core.config import BackboneConfig
from core.errors import ConfigurationError
from model.layers import BatchNorm2d, Module, conv1x1, conv3x3, leaky

logger = logging.getLogger(__name__)

NUM_STAGES = 5
PYRAMID_STRIDES = (8, 16, 32)


@dataclass
class FeaturePyramid:
    c3: Tensor
    c4: Tensor
    c5: Tensor

    def levels(self) -> list[Tensor]:
        return [self.c3, self.c4, self.c5]


class ResidualBlock(Module):
    """Pre-activation identity block: x + conv(act(bn(conv(act(bn(x))))))."""

    def __init__(self, channels: int, width_ratio: float, rng: np.random.Generator):
        inner = max(1, round(channels * width_ratio))
        self.bn1 = BatchNorm2d(channels)
        self.conv1 = conv3x3(channels, inner, rng, bias=False)
        self.bn2 = BatchNorm2d(inner)
        self.conv2 = conv3x3(inner, channels, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        r = self.conv1(leaky(self.bn1(x)))
        r = self.conv2(leaky(self.bn2(r)))
        return merge([x, r], "add")


class DownsampleBlock(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.bn = BatchNorm2d(cin)
        self.conv = conv3x3(cin, cout, rng, stride=2, bias=False)
        self.skip = conv1x1(cin, cout, rng, stride=2, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return merge([self.skip(x), self.conv(leaky(self.bn(x)))], "add")


class Stage(Module):
    def __init__(
        self, cin: int, cout: int, blocks: int, width_ratio: float, rng: np.random.Generator
    ):
        self.down = DownsampleBlock(cin, cout, rng)
        self.blocks = [ResidualBlock(cout, width_ratio, rng) for _ in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.down(x)
        for block in self.blocks:
            x = block(x)
        return x


class LWNet(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.stem = conv3x3(3, cfg.stem_channels, rng)
        cin = cfg.stem_channels
        self.stages = []
        for cout, blocks in zip(cfg.channel_schedule, cfg.blocks_per_stage):
            self.stages.append(Stage(cin, cout, blocks, cfg.residual_width_ratio, rng))
            cin = cout

    @property
    def out_channels(self) -> tuple[int, int, int]:
        sched = self._cfg.channel_schedule
        return sched[2], sched[3], sched[4]

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ConfigurationError(f"backbone expects (n, 3, h, w) images, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ConfigurationError(f"input {h}x{w} is not divisible by 32")
        x = self.stem(image)
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        return FeaturePyramid(c3=outputs[2], c4=outputs[3], c5=outputs[4])


def build_lwnet(cfg: BackboneConfig, seed: int = 0) -> LWNet:
    # re-validate: the config may have been built with model_construct
    cfg = BackboneConfig.model_validate(cfg.model_dump())
    backbone = LWNet(cfg, np.random.default_rng(seed))
    backbone.name_parameters()
    logger.debug(f"Built LW-net with {backbone.parameter_count()} parameters")
    return backbone

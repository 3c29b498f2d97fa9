import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from autodiff.tensor import Tensor
from autodiff.weights import load_weights, save_weights
from core.config import ModelSection
from model.backbone import PYRAMID_STRIDES, LWNet
from model.fpn import Aspp, GatedFpn
from model.heads import (
    DetectionHead,
    MaskDecoder,
    RawLevelPrediction,
    SemanticHead,
    SemanticMap,
)
from model.layers import Module

logger = logging.getLogger(__name__)

LEVEL_NAMES = ("P3", "P4", "P5")


@dataclass
class NetworkOutput:
    levels: list[RawLevelPrediction]
    semantic: SemanticMap


class DaSNet(Module):
    def __init__(self, cfg: ModelSection, rng: np.random.Generator):
        self._cfg = cfg
        n = cfg.fpn.fpn_channels
        self.backbone = LWNet(cfg.backbone, rng)
        self.fpn = GatedFpn(self.backbone.out_channels, n, rng)
        self.aspp = [Aspp(n, cfg.aspp, rng) for _ in LEVEL_NAMES]
        self.heads = [
            DetectionHead(n, cfg.heads.head_channels, cfg.num_anchors, cfg.num_classes, rng)
            for _ in LEVEL_NAMES
        ]
        self.mask_decoders = [
            MaskDecoder(n, cfg.heads.mask_decoder_channels, rng) for _ in LEVEL_NAMES
        ]
        self.semantic = SemanticHead(n, rng)

    @property
    def config(self) -> ModelSection:
        return self._cfg

    @property
    def strides(self) -> tuple[int, int, int]:
        return PYRAMID_STRIDES

    def forward(self, images: Tensor) -> NetworkOutput:
        pyramid = self.backbone(images)
        p3, p4, p5 = self.fpn(pyramid)
        levels = []
        for p, aspp, head in zip((p3, p4, p5), self.aspp, self.heads):
            levels.append(head(aspp(p)))
        return NetworkOutput(levels=levels, semantic=self.semantic(p3, p4, p5))


def build_dasnet(cfg: ModelSection, seed: int | None = None) -> DaSNet:
    model = DaSNet(cfg, np.random.default_rng(cfg.seed if seed is None else seed))
    model.name_parameters()
    logger.info(f"Built DaSNet-V2 with {model.parameter_count()} parameters")
    return model


def save_model(model: DaSNet, path: Path | str) -> int:
    return save_weights(model.state_dict(), path)


def load_model(cfg: ModelSection, path: Path | str) -> DaSNet:
    model = build_dasnet(cfg)
    model.load_state_dict(load_weights(path))
    return model

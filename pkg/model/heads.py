import logging
from dataclasses import dataclass

import numpy as np

from autodiff.ops import activation, merge, upsample_nearest
from autodiff.tensor import Tensor, no_grad
from core.errors import ConfigurationError
from model.layers import Module, conv1x1, conv3x3, leaky

logger = logging.getLogger(__name__)

MASK_SIZE = 32
FOCAL_PRIOR = 0.01
OUTPUT_INIT_STD = 0.01


@dataclass
class RawLevelPrediction:
    cls: Tensor  # (n, B*(1+K), h, w): per anchor [objectness, class...]
    box: Tensor  # (n, B*4, h, w): per anchor (tx, ty, tw, th)
    mask_feat: Tensor  # (n, N, h, w): one mask seed per grid cell


@dataclass
class SemanticMap:
    logits: Tensor  # (n, 2, H, W) over {background, branch}

    def probabilities(self) -> np.ndarray:
        with no_grad():
            return activation(self.logits.detach(), "softmax_channels").data

    def labels(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=1).astype(np.uint8)


class Subnet(Module):
    def __init__(self, cin: int, hidden: int, cout: int, rng: np.random.Generator):
        self.conv = conv3x3(cin, hidden, rng)
        self.out = conv1x1(hidden, cout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(leaky(self.conv(x)))


class DetectionHead(Module):
    def __init__(
        self,
        channels: int,
        hidden: int,
        num_anchors: int,
        num_classes: int,
        rng: np.random.Generator,
    ):
        self.num_anchors = num_anchors
        self.num_classes = num_classes
        per_anchor = 1 + num_classes
        self.cls_subnet = Subnet(channels, hidden, num_anchors * per_anchor, rng)
        self.box_subnet = Subnet(channels, hidden, num_anchors * 4, rng)
        self.mask_subnet = Subnet(channels, hidden, channels, rng)
        prior_bias = -np.log((1.0 - FOCAL_PRIOR) / FOCAL_PRIOR)
        for subnet in (self.cls_subnet, self.box_subnet):
            weight = subnet.out.weight
            weight.data = (rng.standard_normal(weight.shape) * OUTPUT_INIT_STD).astype(np.float32)
        self.cls_subnet.out.bias.data[::per_anchor] = prior_bias

    def forward(self, encoded: Tensor) -> RawLevelPrediction:
        return RawLevelPrediction(
            cls=self.cls_subnet(encoded),
            box=self.box_subnet(encoded),
            mask_feat=self.mask_subnet(encoded),
        )


class MaskDecoder(Module):
    """Shared per-cell decoder: (M, N, 1, 1) seeds -> (M, 2, 32, 32) logits."""

    def __init__(self, channels: int, stage_channels: list[int], rng: np.random.Generator):
        self.channels = channels
        self.stages = []
        cin = channels
        for cout in stage_channels:
            self.stages.append(conv3x3(cin, cout, rng))
            cin = cout
        self.out = conv1x1(cin, 2, rng)

    def forward(self, cells: Tensor) -> Tensor:
        if cells.data.ndim != 4 or cells.shape[1:] != (self.channels, 1, 1):
            raise ConfigurationError(
                f"mask decoder expects (M, {self.channels}, 1, 1) seeds, got {cells.shape}"
            )
        x = cells
        for conv in self.stages:
            x = leaky(conv(upsample_nearest(x, 2)))
        return self.out(x)


def mask_decoder_forward(decoder: MaskDecoder, cell_feature: np.ndarray) -> np.ndarray:
    """Decode one cell's N-vector into 32x32x2 logits (height, width, channel)."""
    vec = np.asarray(cell_feature, dtype=np.float32)
    if vec.shape != (decoder.channels,):
        raise ConfigurationError(
            f"cell feature must have length {decoder.channels}, got shape {vec.shape}"
        )
    with no_grad():
        logits = decoder(Tensor(vec.reshape(1, -1, 1, 1)))
    return logits.data[0].transpose(1, 2, 0)


class SemanticHead(Module):
    """Concatenative fusion at stride 8, three 3x3 convs, x8 nearest upsample."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = conv3x3(3 * channels, channels, rng)
        self.conv2 = conv3x3(channels, channels, rng)
        self.conv3 = conv3x3(channels, 2, rng)

    def forward(self, p3: Tensor, p4: Tensor, p5: Tensor) -> SemanticMap:
        fused = merge(
            [p3, upsample_nearest(p4, 2), upsample_nearest(p5, 4)], "concat_channels"
        )
        x = leaky(self.conv1(fused))
        x = leaky(self.conv2(x))
        return SemanticMap(logits=upsample_nearest(self.conv3(x), 8))

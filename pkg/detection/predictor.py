import logging
from dataclasses import dataclass

import numpy as np

from autodiff.tensor import Tensor, no_grad
from core.config import EvalSection
from core.errors import ConfigurationError
from detection.anchors import LEVELS, Anchor, level_anchors
from detection.decode import Detection, decode_boxes, nms
from detection.render import render_instance_mask
from model.network import DaSNet

logger = logging.getLogger(__name__)


@dataclass
class Prediction:
    detections: list[Detection]
    branch_map: np.ndarray  # (H, W) uint8 argmax labels, 1 = branch

    @property
    def rendered_masks(self) -> list[np.ndarray | None]:
        return [d.rendered_mask for d in self.detections]


def image_to_tensor(rgb: np.ndarray) -> Tensor:
    """(H, W, 3) uint8 RGB -> (1, 3, H, W) float32 in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ConfigurationError(f"expected an (H, W, 3) image, got shape {rgb.shape}")
    chw = rgb.astype(np.float32).transpose(2, 0, 1) / 255.0
    return Tensor(chw[None])


class Predictor:
    def __init__(self, model: DaSNet, anchors: list[Anchor], eval_cfg: EvalSection):
        self.model = model
        self.anchors = anchors
        self.eval_cfg = eval_cfg

    def predict_batch(self, images: Tensor) -> list[Prediction]:
        self.model.eval()
        n, _, height, width = images.shape
        with no_grad():
            out = self.model(images)
        labels = out.semantic.labels()
        predictions = []
        for b in range(n):
            candidates: list[Detection] = []
            for level, raw, stride, decoder in zip(
                LEVELS, out.levels, self.model.strides, self.model.mask_decoders
            ):
                candidates.extend(
                    decode_boxes(
                        raw,
                        level_anchors(self.anchors, level),
                        stride,
                        self.eval_cfg.conf_threshold,
                        (height, width),
                        mask_decoder=decoder,
                        batch_index=b,
                    )
                )
            kept = nms(candidates, self.eval_cfg.nms_iou)
            for det in kept:
                render_instance_mask(det, (height, width), self.eval_cfg.mask_threshold)
            predictions.append(Prediction(detections=kept, branch_map=labels[b]))
            logger.debug(f"Image {b}: {len(candidates)} candidates, {len(kept)} after NMS")
        return predictions

    def predict(self, rgb: np.ndarray) -> Prediction:
        expected = tuple(self.model.config.input_size)
        if tuple(rgb.shape[:2]) != expected:
            raise ConfigurationError(
                f"image size {rgb.shape[:2]} differs from model input size {expected}"
            )
        return self.predict_batch(image_to_tensor(rgb))[0]

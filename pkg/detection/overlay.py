import logging
from collections.abc import Sequence

import cv2
import numpy as np

from metrics.evaluation import Box
from pointcloud.geometry import BRANCH_COLOR, INSTANCE_PALETTE

logger = logging.getLogger(__name__)


def render_overlay(
    rgb: np.ndarray,
    boxes: Sequence[Box],
    masks: Sequence[np.ndarray | None],
    branch_map: np.ndarray | None,
    alpha: float = 0.5,
) -> np.ndarray:
    """Blend palette-colored fruit masks and the brown branch map onto an RGB image."""
    color = np.zeros_like(rgb)
    covered = np.zeros(rgb.shape[:2], dtype=bool)
    if branch_map is not None:
        on_branch = branch_map > 0
        color[on_branch] = BRANCH_COLOR
        covered |= on_branch
    for i in reversed(range(len(masks))):
        if masks[i] is None:
            continue
        fruit = masks[i] > 0
        color[fruit] = INSTANCE_PALETTE[i % len(INSTANCE_PALETTE)]
        covered |= fruit
    blended = cv2.addWeighted(rgb, 1.0 - alpha, color, alpha, 0.0)
    out = np.where(covered[..., None], blended, rgb).astype(np.uint8)
    for i, (x, y, w, h) in enumerate(boxes):
        c = tuple(int(v) for v in INSTANCE_PALETTE[i % len(INSTANCE_PALETTE)])
        p0 = (int(round(x)), int(round(y)))
        p1 = (int(round(x + w)) - 1, int(round(y + h)) - 1)
        cv2.rectangle(out, p0, p1, c, 1)
    return out

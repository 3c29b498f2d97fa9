import logging

import cv2
import numpy as np

from detection.decode import Detection

logger = logging.getLogger(__name__)


def render_instance_mask(
    det: Detection, image_size: tuple[int, int], threshold: float = 0.5
) -> np.ndarray:
    """Resize the 32x32 fruit grid to the box, binarize, paste into a full-size map.

    Boxes narrower or shorter than one pixel, or detections without a mask grid, give an
    empty map and set `det.degenerate`.
    """
    height, width = image_size
    canvas = np.zeros((height, width), dtype=np.uint8)
    x, y, w, h = det.box
    x0, y0 = max(int(round(x)), 0), max(int(round(y)), 0)
    x1, y1 = min(int(round(x + w)), width), min(int(round(y + h)), height)
    bw, bh = x1 - x0, y1 - y0
    if bw < 1 or bh < 1 or det.mask32 is None:
        det.degenerate = True
        det.rendered_mask = canvas
        return canvas
    grid = np.asarray(det.mask32, dtype=np.float32)
    resized = cv2.resize(grid, (bw, bh), interpolation=cv2.INTER_LINEAR)
    canvas[y0:y1, x0:x1] = (resized > threshold).astype(np.uint8)
    det.rendered_mask = canvas
    return canvas

import logging
from dataclasses import replace

import cv2
import numpy as np

from core.config import AugmentPolicy
from data.annotations import AnnotatedImage, Instance, tight_box

logger = logging.getLogger(__name__)

HUE_SHIFT = 5  # OpenCV hue units (2 degrees each)
SAT_VAL_RANGE = 0.20
BRIGHTNESS_RANGE = 0.15
CONTRAST_RANGE = 0.15
AMPLIFIER_ZOOMS = (2, 4)
MIN_VISIBLE_AREA = 30


def hflip(image: AnnotatedImage) -> AnnotatedImage:
    width = image.size[1]
    return replace(
        image,
        rgb=image.rgb[:, ::-1].copy(),
        depth=None if image.depth is None else image.depth[:, ::-1].copy(),
        branch_mask=image.branch_mask[:, ::-1].copy(),
        instances=[
            Instance(
                box=(width - x - w, y, w, h),
                mask=inst.mask[:, ::-1].copy(),
                class_name=inst.class_name,
            )
            for inst in image.instances
            for x, y, w, h in [inst.box]
        ],
    )


def rot90(image: AnnotatedImage, k: int = 1) -> AnnotatedImage:
    """Rotate counter-clockwise by k quarter turns."""
    out = image
    for _ in range(k % 4):
        width = out.size[1]
        out = replace(
            out,
            rgb=np.rot90(out.rgb).copy(),
            depth=None if out.depth is None else np.rot90(out.depth).copy(),
            branch_mask=np.rot90(out.branch_mask).copy(),
            instances=[
                Instance(
                    box=(y, width - x - w, h, w),
                    mask=np.rot90(inst.mask).copy(),
                    class_name=inst.class_name,
                )
                for inst in out.instances
                for x, y, w, h in [inst.box]
            ],
        )
    return out


def _jitter_region(
    rgb: np.ndarray, region: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    hsv = cv2.cvtColor(rgb, cv2.COLOR_RGB2HSV).astype(np.float32)
    hsv[..., 0] = np.mod(hsv[..., 0] + rng.uniform(-HUE_SHIFT, HUE_SHIFT), 180.0)
    hsv[..., 1] *= 1.0 + rng.uniform(-SAT_VAL_RANGE, SAT_VAL_RANGE)
    hsv[..., 2] *= 1.0 + rng.uniform(-SAT_VAL_RANGE, SAT_VAL_RANGE)
    hsv = np.clip(hsv, 0, [179, 255, 255]).astype(np.uint8)
    out = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).astype(np.float32)
    out *= 1.0 + rng.uniform(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE)
    mean = out[region].mean(axis=0)
    out = (out - mean) * (1.0 + rng.uniform(-CONTRAST_RANGE, CONTRAST_RANGE)) + mean
    result = rgb.copy()
    result[region] = np.clip(np.round(out[region]), 0, 255).astype(np.uint8)
    return result


def inmask_color(image: AnnotatedImage, rng: np.random.Generator) -> AnnotatedImage:
    """HSV, brightness and contrast jitter drawn per object; background pixels are kept."""
    rgb = image.rgb
    regions = [inst.mask > 0 for inst in image.instances]
    regions.append(image.branch_mask > 0)
    for region in regions:
        if region.any():
            rgb = _jitter_region(rgb, region, rng)
    return replace(image, rgb=rgb)


def augment(image: AnnotatedImage, seed: int, policy: AugmentPolicy) -> AnnotatedImage:
    rng = np.random.default_rng(seed)
    out = image
    if policy.hflip and rng.random() < 0.5:
        out = hflip(out)
    if policy.rot90:
        height, width = out.size
        # non-square inputs only take half turns so the input size is preserved
        k = int(rng.integers(0, 4)) if height == width else 2 * int(rng.integers(0, 2))
        out = rot90(out, k)
    if policy.inmask_color:
        out = inmask_color(out, rng)
    return out


def scale_amplifier(
    image: AnnotatedImage,
    seed: int,
    median_area: float | None = None,
    min_visible_area: int = MIN_VISIBLE_AREA,
) -> AnnotatedImage:
    """Zoom-crop (2x or 4x) around a randomly chosen small instance.

    Small means box area below `median_area` (the dataset median when given, else this
    image's median). Instances left with fewer than `min_visible_area` pixels are dropped.
    """
    if not image.instances:
        return image
    rng = np.random.default_rng(seed)
    height, width = image.size
    areas = np.array([inst.box[2] * inst.box[3] for inst in image.instances], dtype=np.float64)
    threshold = float(np.median(areas)) if median_area is None else median_area
    candidates = np.flatnonzero(areas < threshold)
    if candidates.size == 0:
        candidates = np.flatnonzero(areas <= threshold)
    if candidates.size == 0:
        candidates = np.arange(len(areas))
    target = image.instances[int(rng.choice(candidates))]
    zoom = int(rng.choice(AMPLIFIER_ZOOMS))

    win_w, win_h = max(width // zoom, 1), max(height // zoom, 1)
    x, y, w, h = target.box
    x0 = int(min(max(round(x + w / 2 - win_w / 2), 0), width - win_w))
    y0 = int(min(max(round(y + h / 2 - win_h / 2), 0), height - win_h))

    def _crop(arr: np.ndarray, interp: int) -> np.ndarray:
        window = arr[y0 : y0 + win_h, x0 : x0 + win_w]
        return cv2.resize(window, (width, height), interpolation=interp)

    instances = []
    for inst in image.instances:
        mask = _crop(inst.mask, cv2.INTER_NEAREST)
        if np.count_nonzero(mask) < min_visible_area:
            continue
        # boxes follow the remapped visible pixels, so they stay clipped to the window
        instances.append(Instance(box=tight_box(mask), mask=mask, class_name=inst.class_name))
    logger.debug(
        f"amplifier: zoom {zoom}x at ({x0}, {y0}), kept {len(instances)}/{len(image.instances)}"
    )
    return replace(
        image,
        rgb=_crop(image.rgb, cv2.INTER_LINEAR),
        depth=None if image.depth is None else _crop(image.depth, cv2.INTER_NEAREST),
        branch_mask=_crop(image.branch_mask, cv2.INTER_NEAREST),
        instances=instances,
    )

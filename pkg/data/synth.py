"""Synthetic orchard scenes with exact annotations.

Branches and apples are painted far-to-near into an owner map so every pixel belongs to
exactly one primitive (or the background). Visible instance masks, the branch mask and
the depth map are read off that owner map.
"""

import logging
from dataclasses import dataclass

import cv2
import numpy as np

from core.config import SynthSection
from data.annotations import AnnotatedImage, Instance, tight_box

logger = logging.getLogger(__name__)

BACKGROUND = 0
LEAF_GREEN = np.array([58, 96, 42], dtype=np.float32)
BARK = np.array([62, 44, 30], dtype=np.float32)
FOCAL_PX = 615.0


@dataclass
class _Primitive:
    kind: str  # "fruit" | "branch"
    depth_mm: float
    color: tuple[int, int, int]
    # fruit
    center: tuple[int, int] = (0, 0)
    axes: tuple[int, int] = (0, 0)
    angle: float = 0.0
    # branch
    points: np.ndarray | None = None
    width: int = 0


def _texture(rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    height, width = size
    coarse = rng.normal(0.0, 1.0, (max(height // 16, 2), max(width // 16, 2), 3))
    coarse = cv2.resize(
        coarse.astype(np.float32), (width, height), interpolation=cv2.INTER_LINEAR
    )
    fine = rng.normal(0.0, 1.0, (height, width, 3)).astype(np.float32)
    return LEAF_GREEN + 28.0 * coarse + 6.0 * fine


def _branch(rng: np.random.Generator, cfg: SynthSection) -> _Primitive:
    height, width = cfg.image_size
    side = int(rng.integers(0, 4))
    if side == 0:
        start = (0.0, rng.uniform(0, height))
    elif side == 1:
        start = (width - 1.0, rng.uniform(0, height))
    elif side == 2:
        start = (rng.uniform(0, width), 0.0)
    else:
        start = (rng.uniform(0, width), height - 1.0)
    heading = np.arctan2(height / 2.0 - start[1], width / 2.0 - start[0])
    pts = [start]
    step = 0.25 * max(height, width)
    for _ in range(int(rng.integers(3, 6))):
        heading += rng.uniform(-0.6, 0.6)
        x, y = pts[-1]
        pts.append((x + step * np.cos(heading), y + step * np.sin(heading)))
    shade = rng.uniform(0.8, 1.2)
    return _Primitive(
        kind="branch",
        depth_mm=float(rng.uniform(*cfg.near_depth_mm)),
        color=tuple(int(c) for c in np.clip(BARK * shade, 0, 255)),
        points=np.round(np.array(pts)).astype(np.int32),
        width=int(rng.integers(cfg.branch_width[0], cfg.branch_width[1] + 1)),
    )


def _fruit(rng: np.random.Generator, cfg: SynthSection) -> _Primitive:
    height, width = cfg.image_size
    radius = int(rng.integers(cfg.fruit_radius[0], cfg.fruit_radius[1] + 1))
    red = int(rng.integers(150, 230))
    return _Primitive(
        kind="fruit",
        depth_mm=float(rng.uniform(*cfg.near_depth_mm)),
        color=(red, int(rng.integers(10, 60)), int(rng.integers(10, 45))),
        center=(int(rng.integers(0, width)), int(rng.integers(0, height))),
        axes=(radius, max(int(round(radius * rng.uniform(0.85, 1.0))), 1)),
        angle=float(rng.uniform(0.0, 180.0)),
    )


def _paint(canvas: np.ndarray, prim: _Primitive, value: int | tuple[int, int, int]) -> None:
    if prim.kind == "fruit":
        cv2.ellipse(canvas, prim.center, prim.axes, prim.angle, 0, 360, value, -1, cv2.LINE_8)
    else:
        cv2.polylines(canvas, [prim.points], False, value, prim.width, cv2.LINE_8)


def _fruit_depth(prim: _Primitive, region: np.ndarray) -> np.ndarray:
    """Spherical bulge toward the camera, in millimeters."""
    ys, xs = np.nonzero(region)
    cx, cy = prim.center
    rho = np.hypot(xs - cx, ys - cy) / max(prim.axes[0], 1)
    radius_mm = prim.axes[0] * prim.depth_mm / FOCAL_PX
    return prim.depth_mm - radius_mm * np.sqrt(np.clip(1.0 - rho**2, 0.0, 1.0))


def synth_orchard(seed: int, cfg: SynthSection, name: str | None = None) -> AnnotatedImage:
    rng = np.random.default_rng(seed)
    height, width = cfg.image_size
    rgb = _texture(rng, (height, width))

    n_branches = int(rng.integers(cfg.branch_count[0], cfg.branch_count[1] + 1))
    n_fruits = int(rng.integers(cfg.fruit_count[0], cfg.fruit_count[1] + 1))
    prims = [_branch(rng, cfg) for _ in range(n_branches)]
    prims += [_fruit(rng, cfg) for _ in range(n_fruits)]
    order = sorted(range(len(prims)), key=lambda k: (-prims[k].depth_mm, k))

    owner = np.zeros((height, width), dtype=np.uint16)
    paint = np.zeros((height, width, 3), dtype=np.uint8)
    for k in order:
        _paint(owner, prims[k], k + 1)
        _paint(paint, prims[k], prims[k].color)
    covered = owner != BACKGROUND
    # shading keeps some of the texture on painted primitives
    rgb[covered] = 0.85 * paint[covered] + 0.15 * (rgb[covered] - LEAF_GREEN + 128.0)

    far = rng.uniform(*cfg.far_depth_mm)
    tilt = rng.uniform(-200.0, 200.0)
    depth = far + tilt * (np.arange(height, dtype=np.float64)[:, None] / height - 0.5)
    depth = np.broadcast_to(depth, (height, width)).copy()

    branch_mask = np.zeros((height, width), dtype=np.uint8)
    instances: list[Instance] = []
    for k, prim in enumerate(prims):
        region = owner == k + 1
        if prim.kind == "branch":
            branch_mask[region] = 1
            depth[region] = prim.depth_mm
            continue
        if region.any():
            depth[region] = _fruit_depth(prim, region)
        area = int(np.count_nonzero(region))
        if area < cfg.min_visible_area:
            logger.debug(f"seed {seed}: culled fruit {k} with visible area {area}")
            continue
        instances.append(Instance(box=tight_box(region), mask=region.astype(np.uint8)))

    depth += rng.normal(0.0, cfg.depth_noise_mm, depth.shape)
    return AnnotatedImage(
        name=name or f"synth_{seed:06d}",
        rgb=np.clip(np.round(rgb), 0, 255).astype(np.uint8),
        depth=np.clip(np.round(depth), 1, 65535).astype(np.uint16),
        instances=instances,
        branch_mask=branch_mask,
    )


def synth_dataset(seed: int, count: int, cfg: SynthSection) -> list[AnnotatedImage]:
    images = [synth_orchard(seed + k, cfg) for k in range(count)]
    total = sum(len(im.instances) for im in images)
    logger.info(f"Generated {count} synthetic images with {total} apples (seed {seed})")
    return images

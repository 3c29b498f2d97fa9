"""Pinhole deprojection of depth frames and the fruit / branch / background coloring.

Camera frame: x right, y down, z forward, meters.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from core.config import Intrinsics
from core.errors import ConfigurationError

logger = logging.getLogger(__name__)

INSTANCE_PALETTE: tuple[tuple[int, int, int], ...] = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
    (0, 128, 128),
    (220, 190, 255),
)
BRANCH_COLOR = (139, 69, 19)
BACKGROUND_COLOR = (0, 0, 0)


@dataclass
class DeprojectedPoints:
    points: np.ndarray  # (N, 3) float64 meters
    pixels: np.ndarray  # (N, 2) int64 source (row, col)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ColoredPointCloud:
    points: np.ndarray  # (N, 3) float32
    colors: np.ndarray  # (N, 3) uint8

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ConfigurationError(
                f"{len(self.points)} points but {len(self.colors)} colors"
            )
        if not np.all(np.isfinite(self.points)):
            raise ConfigurationError("point cloud holds non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


def deproject(
    depth: np.ndarray,
    intrinsics: Intrinsics,
    stride: int = 1,
    min_depth: float | None = None,
    max_depth: float | None = None,
) -> DeprojectedPoints:
    """Back-project every `stride`-th pixel with depth > 0 (and inside the optional range)."""
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ConfigurationError(f"depth map must be 2-D, got shape {depth.shape}")
    rows, cols = np.mgrid[0 : depth.shape[0] : stride, 0 : depth.shape[1] : stride]
    z = depth[rows, cols].astype(np.float64) * intrinsics.depth_scale
    valid = z > 0
    if min_depth is not None:
        valid &= z >= min_depth
    if max_depth is not None:
        valid &= z <= max_depth
    u, v, z = cols[valid], rows[valid], z[valid]
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    return DeprojectedPoints(
        points=np.column_stack([x, y, z]),
        pixels=np.column_stack([v, u]).astype(np.int64),
    )


def reproject(points: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """(N, 3) camera points -> (N, 3) of (u, v, depth in sensor units)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    u = x * intrinsics.fx / z + intrinsics.cx
    v = y * intrinsics.fy / z + intrinsics.cy
    return np.column_stack([u, v, z / intrinsics.depth_scale])


def instance_label_map(
    masks: Sequence[np.ndarray | None], size: tuple[int, int]
) -> np.ndarray:
    """-1 for no fruit, else the index of the lowest-numbered fruit covering the pixel."""
    labels = np.full(size, -1, dtype=np.int64)
    for i in reversed(range(len(masks))):
        if masks[i] is not None:
            labels[np.asarray(masks[i]) > 0] = i
    return labels


def colorize(
    points: DeprojectedPoints,
    instance_masks: Sequence[np.ndarray | None],
    branch_map: np.ndarray | None,
    rgb: np.ndarray | None = None,
    branch_original_color: bool = False,
) -> ColoredPointCloud:
    """Fruit palette color > branch color > black, decided per source pixel."""
    if branch_map is not None:
        size = branch_map.shape
    elif instance_masks and instance_masks[0] is not None:
        size = instance_masks[0].shape
    else:
        size = (
            int(points.pixels[:, 0].max()) + 1 if len(points) else 0,
            int(points.pixels[:, 1].max()) + 1 if len(points) else 0,
        )
    if branch_original_color and rgb is None:
        raise ConfigurationError("branch_original_color needs the RGB frame")

    rows, cols = points.pixels[:, 0], points.pixels[:, 1]
    labels = instance_label_map(instance_masks, size)[rows, cols]
    colors = np.zeros((len(points), 3), dtype=np.uint8)
    if branch_map is not None:
        on_branch = (np.asarray(branch_map)[rows, cols] > 0) & (labels < 0)
        if branch_original_color:
            colors[on_branch] = rgb[rows[on_branch], cols[on_branch]]
        else:
            colors[on_branch] = BRANCH_COLOR
    fruit = labels >= 0
    palette = np.array(INSTANCE_PALETTE, dtype=np.uint8)
    colors[fruit] = palette[labels[fruit] % len(palette)]
    return ColoredPointCloud(points=points.points, colors=colors)

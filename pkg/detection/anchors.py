import logging
from dataclasses import dataclass

import numpy as np

from core.config import validate_anchor_pairs

logger = logging.getLogger(__name__)

LEVELS = ("P3", "P4", "P5")
ANCHORS_PER_LEVEL = 2


@dataclass(frozen=True)
class Anchor:
    level: str
    width: float
    height: float

    @property
    def level_index(self) -> int:
        return LEVELS.index(self.level)


def generate_anchors(pairs: list[tuple[float, float]]) -> list[Anchor]:
    """Bind 6 (w, h) priors to levels in ascending size: 2 smallest on P3, 2 largest on P5."""
    pairs = validate_anchor_pairs(list(pairs))
    ordered = sorted(pairs, key=lambda p: (p[0] * p[1], p[0], p[1]))
    return [
        Anchor(level=LEVELS[i // ANCHORS_PER_LEVEL], width=w, height=h)
        for i, (w, h) in enumerate(ordered)
    ]


def level_anchors(anchors: list[Anchor], level: str) -> list[Anchor]:
    return [a for a in anchors if a.level == level]


def shape_iou(w1: float, h1: float, w2: float, h2: float) -> float:
    """IoU of two boxes sharing a center."""
    inter = min(w1, w2) * min(h1, h2)
    union = w1 * h1 + w2 * h2 - inter
    return inter / union if union > 0 else 0.0


def kmeans_anchors(
    sizes: np.ndarray, k: int = 6, seed: int = 0, iterations: int = 100
) -> list[tuple[float, float]]:
    """k-means over (w, h) with 1 - shape IoU as distance; returns pairs sorted by area."""
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 2)
    if len(sizes) < k:
        raise ValueError(f"need at least {k} boxes for {k} anchors, got {len(sizes)}")
    rng = np.random.default_rng(seed)
    centers = sizes[rng.choice(len(sizes), size=k, replace=False)]

    def _ious(c: np.ndarray) -> np.ndarray:
        inter = np.minimum(sizes[:, None, 0], c[None, :, 0]) * np.minimum(
            sizes[:, None, 1], c[None, :, 1]
        )
        union = (sizes[:, 0] * sizes[:, 1])[:, None] + (c[:, 0] * c[:, 1])[None, :] - inter
        return inter / union

    assign = np.full(len(sizes), -1)
    for _ in range(iterations):
        new_assign = np.argmax(_ious(centers), axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = sizes[assign == j]
            if len(members):
                centers[j] = np.median(members, axis=0)
    ordered = sorted(centers.tolist(), key=lambda p: p[0] * p[1])
    return [(round(w, 1), round(h, 1)) for w, h in ordered]

import logging
from dataclasses import dataclass, field

import cv2
import numpy as np

from data.annotations import AnnotatedImage, Instance
from detection.anchors import ANCHORS_PER_LEVEL, LEVELS, Anchor, shape_iou
from detection.decode import encode_box
from model.backbone import PYRAMID_STRIDES
from model.heads import MASK_SIZE

logger = logging.getLogger(__name__)

MIN_GT_SIZE = 2


@dataclass
class LevelTargets:
    objectness: np.ndarray  # (n, B, h, w) in {0, 1}
    ignore: np.ndarray  # (n, B, h, w) bool, no objectness loss
    box: np.ndarray  # (n, B, 4, h, w) encoded (tx, ty, tw, th) at positives
    mask_cells: np.ndarray  # (M, 3) rows of (batch, i, j), one per positive cell
    mask_targets: np.ndarray  # (M, 32, 32) uint8

    @property
    def positive(self) -> np.ndarray:
        return self.objectness > 0

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.objectness))


@dataclass
class TargetTensors:
    levels: list[LevelTargets]
    semantic: np.ndarray  # (n, H, W) in {0, 1}
    assigned: list[tuple[int, str, tuple[int, int], int]] = field(default_factory=list)

    @property
    def num_positive(self) -> int:
        return sum(t.num_positive for t in self.levels)


def _empty_level(grid: tuple[int, int]) -> LevelTargets:
    gh, gw = grid
    return LevelTargets(
        objectness=np.zeros((1, ANCHORS_PER_LEVEL, gh, gw), dtype=np.float32),
        ignore=np.zeros((1, ANCHORS_PER_LEVEL, gh, gw), dtype=bool),
        box=np.zeros((1, ANCHORS_PER_LEVEL, 4, gh, gw), dtype=np.float32),
        mask_cells=np.zeros((0, 3), dtype=np.int64),
        mask_targets=np.zeros((0, MASK_SIZE, MASK_SIZE), dtype=np.uint8),
    )


def _center_cell(inst: Instance, stride: int, grid: tuple[int, int]) -> tuple[int, int]:
    x, y, w, h = inst.box
    i = min(int((y + h / 2.0) // stride), grid[0] - 1)
    j = min(int((x + w / 2.0) // stride), grid[1] - 1)
    return i, j


def mask_target(inst: Instance) -> np.ndarray:
    x, y, w, h = inst.box
    crop = inst.mask[y : y + h, x : x + w]
    return cv2.resize(crop, (MASK_SIZE, MASK_SIZE), interpolation=cv2.INTER_NEAREST)


def assign_targets(
    image: AnnotatedImage,
    anchors: list[Anchor],
    input_size: tuple[int, int],
    ignore_iou: float = 0.5,
) -> TargetTensors:
    """Targets for one image.

    Each GT (largest first) takes its best shape-IoU anchor at the cell holding its center;
    if that slot is already taken it falls back to the next-best free anchor. Other anchors
    with shape-IoU above `ignore_iou` at their level's center cell are excluded from the
    objectness loss. The first GT to claim a cell owns that cell's mask target.
    """
    height, width = input_size
    grids = [(height // s, width // s) for s in PYRAMID_STRIDES]
    levels = [_empty_level(g) for g in grids]
    cell_masks: list[dict[tuple[int, int], np.ndarray]] = [{} for _ in LEVELS]
    assigned: list[tuple[int, str, tuple[int, int], int]] = []
    ignores: list[tuple[int, int, int, int]] = []

    order = sorted(
        range(len(image.instances)),
        key=lambda k: -image.instances[k].box[2] * image.instances[k].box[3],
    )
    for k in order:
        inst = image.instances[k]
        _, _, w, h = inst.box
        if w < MIN_GT_SIZE or h < MIN_GT_SIZE:
            logger.warning(f"{image.name}: skipping instance {k} with box {inst.box}")
            continue
        ious = [shape_iou(w, h, a.width, a.height) for a in anchors]
        ranking = sorted(range(len(anchors)), key=lambda a: (-ious[a], a))
        chosen = None
        for a in ranking:
            li = anchors[a].level_index
            slot = a - li * ANCHORS_PER_LEVEL
            i, j = _center_cell(inst, PYRAMID_STRIDES[li], grids[li])
            if levels[li].objectness[0, slot, i, j] == 0:
                chosen = (a, li, slot, i, j)
                break
        if chosen is None:
            logger.warning(f"{image.name}: no free anchor for instance {k}, skipped")
            continue
        a, li, slot, i, j = chosen
        anchor = anchors[a]
        t = encode_box(
            tuple(float(v) for v in inst.box),
            (i, j),
            (anchor.width, anchor.height),
            PYRAMID_STRIDES[li],
        )
        levels[li].objectness[0, slot, i, j] = 1.0
        levels[li].box[0, slot, :, i, j] = t
        cell_masks[li].setdefault((i, j), mask_target(inst))
        assigned.append((k, anchor.level, (i, j), a))
        for other in range(len(anchors)):
            if other != a and ious[other] > ignore_iou:
                oli = anchors[other].level_index
                oi, oj = _center_cell(inst, PYRAMID_STRIDES[oli], grids[oli])
                ignores.append((oli, other - oli * ANCHORS_PER_LEVEL, oi, oj))

    for li, slot, i, j in ignores:
        if levels[li].objectness[0, slot, i, j] == 0:
            levels[li].ignore[0, slot, i, j] = True

    for li, masks in enumerate(cell_masks):
        if masks:
            cells = sorted(masks)
            levels[li].mask_cells = np.array([(0, i, j) for i, j in cells], dtype=np.int64)
            levels[li].mask_targets = np.stack([masks[c] for c in cells]).astype(np.uint8)

    return TargetTensors(
        levels=levels,
        semantic=image.branch_mask[None].astype(np.uint8),
        assigned=assigned,
    )


def collate_targets(batch: list[TargetTensors]) -> TargetTensors:
    """Stack per-image targets along the batch axis."""
    levels = []
    for li in range(len(LEVELS)):
        parts = [t.levels[li] for t in batch]
        cells = [
            np.column_stack([np.full(len(p.mask_cells), b), p.mask_cells[:, 1:]])
            for b, p in enumerate(parts)
        ]
        levels.append(
            LevelTargets(
                objectness=np.concatenate([p.objectness for p in parts]),
                ignore=np.concatenate([p.ignore for p in parts]),
                box=np.concatenate([p.box for p in parts]),
                mask_cells=np.concatenate(cells).astype(np.int64),
                mask_targets=np.concatenate([p.mask_targets for p in parts]),
            )
        )
    return TargetTensors(
        levels=levels,
        semantic=np.concatenate([t.semantic for t in batch]),
        assigned=[a for t in batch for a in t.assigned],
    )

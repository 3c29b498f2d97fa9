import logging
from dataclasses import dataclass

import numpy as np

from autodiff.ops import gather_cells
from autodiff.tensor import Tensor, no_grad
from detection.anchors import Anchor
from metrics.evaluation import Box, box_iou
from model.heads import MaskDecoder, RawLevelPrediction

logger = logging.getLogger(__name__)

# center offsets on a cell edge would otherwise give unreachable logit targets
OFFSET_CLAMP = 0.01


@dataclass
class Detection:
    box: Box
    score: float
    class_id: int = 0
    mask32: np.ndarray | None = None  # fruit probability, 32x32
    rendered_mask: np.ndarray | None = None
    level: str = ""
    cell: tuple[int, int] = (0, 0)
    anchor_slot: int = 0
    degenerate: bool = False


def _sigmoid(v: np.ndarray | float) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * np.asarray(v, dtype=np.float64)) + 1.0)


def _logit(p: float) -> float:
    p = min(max(p, OFFSET_CLAMP), 1.0 - OFFSET_CLAMP)
    return float(np.log(p / (1.0 - p)))


def decode_box(
    t: tuple[float, float, float, float],
    cell: tuple[int, int],
    anchor_wh: tuple[float, float],
    stride: int,
) -> Box:
    tx, ty, tw, th = t
    i, j = cell
    cx = (j + float(_sigmoid(tx))) * stride
    cy = (i + float(_sigmoid(ty))) * stride
    w = anchor_wh[0] * float(np.exp(tw))
    h = anchor_wh[1] * float(np.exp(th))
    return (cx - w / 2.0, cy - h / 2.0, w, h)


def encode_box(
    box: Box, cell: tuple[int, int], anchor_wh: tuple[float, float], stride: int
) -> tuple[float, float, float, float]:
    x, y, w, h = box
    i, j = cell
    cx, cy = x + w / 2.0, y + h / 2.0
    tx = _logit(cx / stride - j)
    ty = _logit(cy / stride - i)
    tw = float(np.log(w / anchor_wh[0]))
    th = float(np.log(h / anchor_wh[1]))
    return (tx, ty, tw, th)


def clip_box(box: Box, image_size: tuple[int, int]) -> Box:
    height, width = image_size
    x, y, w, h = box
    x0, y0 = min(max(x, 0.0), width), min(max(y, 0.0), height)
    x1, y1 = min(max(x + w, 0.0), width), min(max(y + h, 0.0), height)
    return (x0, y0, x1 - x0, y1 - y0)


def decode_boxes(
    raw: RawLevelPrediction,
    anchors: list[Anchor],
    level_stride: int,
    conf_threshold: float,
    image_size: tuple[int, int],
    mask_decoder: MaskDecoder | None = None,
    batch_index: int = 0,
) -> list[Detection]:
    """Pre-NMS detections of one pyramid level for one image of the batch."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
    num_anchors = len(anchors)
    cls = raw.cls.data[batch_index]
    per_anchor = cls.shape[0] // num_anchors
    box = raw.box.data[batch_index].reshape(num_anchors, 4, *cls.shape[1:])
    cls = cls.reshape(num_anchors, per_anchor, *cls.shape[1:])
    scores = _sigmoid(cls[:, 0]) * _sigmoid(cls[:, 1])

    dets: list[Detection] = []
    for b, i, j in zip(*np.nonzero(scores >= conf_threshold)):
        anchor = anchors[b]
        decoded = decode_box(
            tuple(float(v) for v in box[b, :, i, j]),
            (int(i), int(j)),
            (anchor.width, anchor.height),
            level_stride,
        )
        dets.append(
            Detection(
                box=clip_box(decoded, image_size),
                score=float(scores[b, i, j]),
                class_id=0,
                level=anchor.level,
                cell=(int(i), int(j)),
                anchor_slot=int(b),
            )
        )
    if mask_decoder is not None and dets:
        cells = sorted({d.cell for d in dets})
        rows = np.array([c[0] for c in cells])
        cols = np.array([c[1] for c in cells])
        with no_grad():
            seeds = gather_cells(
                Tensor(raw.mask_feat.data[batch_index : batch_index + 1]),
                np.zeros(len(cells), dtype=np.int64),
                rows,
                cols,
            )
            logits = mask_decoder(seeds).data
        fruit = _sigmoid(logits[:, 1] - logits[:, 0]).astype(np.float32)
        lookup = {cell: fruit[k] for k, cell in enumerate(cells)}
        for d in dets:
            d.mask32 = lookup[d.cell]
    return dets


def _nms_key(d: Detection) -> tuple[float, float, float]:
    return (-d.score, d.box[0], d.box[1])


def nms(candidates: list[Detection], iou_threshold: float = 0.45) -> list[Detection]:
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    kept: list[Detection] = []
    for cand in sorted(candidates, key=_nms_key):
        if all(box_iou(cand.box, k.box) < iou_threshold for k in kept):
            kept.append(cand)
    return kept

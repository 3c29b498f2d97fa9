import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from pydantic import BaseModel, Field

from core.errors import ConfigurationError

logger = logging.getLogger(__name__)

Box = tuple[float, float, float, float]  # (x_min, y_min, width, height)


class ScoredBox(Protocol):
    box: Box
    score: float


class MatchCounts(BaseModel):
    tp: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(tp=self.tp + other.tp, fp=self.fp + other.fp, fn=self.fn + other.fn)


@dataclass
class MatchResult:
    counts: MatchCounts
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (det, gt, box IoU)


def box_iou(a: Box, b: Box) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def match_detections(
    dets: Sequence[ScoredBox], gts: Sequence[Box], iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy by descending score; a detection is a TP iff its best unmatched GT reaches the threshold."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    matched = [False] * len(gts)
    result = MatchResult(counts=MatchCounts())
    tp = fp = 0
    for d in order:
        best_iou, best_gt = -1.0, -1
        for g, gt in enumerate(gts):
            if matched[g]:
                continue
            iou = box_iou(dets[d].box, gt)
            if iou > best_iou:
                best_iou, best_gt = iou, g
        if best_gt >= 0 and best_iou >= iou_threshold:
            matched[best_gt] = True
            result.pairs.append((d, best_gt, best_iou))
            tp += 1
        else:
            fp += 1
    result.counts = MatchCounts(tp=tp, fp=fp, fn=len(gts) - tp)
    return result


def precision_recall_f1(c: MatchCounts) -> tuple[float, float, float]:
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def semantic_miou(pred: np.ndarray, gt: np.ndarray, classes: Sequence[int] = (0, 1)) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"label maps differ in shape: {pred.shape} vs {gt.shape}")
    ious = []
    for c in classes:
        p, g = pred == c, gt == c
        union = int(np.count_nonzero(p | g))
        ious.append(1.0 if union == 0 else np.count_nonzero(p & g) / union)
    return float(np.mean(ious))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise ConfigurationError(f"masks differ in shape: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def instance_miou(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    if not pairs:
        return 0.0
    return float(np.mean([mask_iou(pred, gt) for pred, gt in pairs]))


class ImageCounts(BaseModel):
    image: str
    tp: int
    fp: int
    fn: int
    mean_box_iou: float
    instance_miou: float
    semantic_miou: float | None = None


class EvalReport(BaseModel):
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    mean_box_iou: float = Field(ge=0.0, le=1.0)
    instance_miou: float = Field(ge=0.0, le=1.0)
    semantic_miou_branch: float = Field(ge=0.0, le=1.0)
    images: list[ImageCounts] = Field(default_factory=list)


@dataclass
class ImagePrediction:
    detections: Sequence[ScoredBox]
    rendered_masks: Sequence[np.ndarray | None]
    branch_map: np.ndarray | None


@dataclass
class ImageTruth:
    name: str
    boxes: Sequence[Box]
    masks: Sequence[np.ndarray]
    branch_map: np.ndarray


def evaluate(
    truths: Sequence[ImageTruth],
    predictions: Sequence[ImagePrediction],
    match_iou: float = 0.5,
) -> EvalReport:
    if len(truths) != len(predictions):
        raise ConfigurationError(
            f"{len(predictions)} predictions for {len(truths)} ground-truth images"
        )
    total = MatchCounts()
    box_ious: list[float] = []
    mask_pairs: list[tuple[np.ndarray, np.ndarray]] = []
    semantic: list[float] = []
    per_image: list[ImageCounts] = []
    for truth, pred in zip(truths, predictions):
        result = match_detections(pred.detections, truth.boxes, match_iou)
        total = total + result.counts
        pairs = []
        for d, g, iou in result.pairs:
            box_ious.append(iou)
            rendered = pred.rendered_masks[d]
            if rendered is None:
                rendered = np.zeros_like(truth.masks[g])
            pairs.append((rendered, truth.masks[g]))
        mask_pairs.extend(pairs)
        sem = None
        if pred.branch_map is not None:
            sem = semantic_miou(pred.branch_map, truth.branch_map)
            semantic.append(sem)
        per_image.append(
            ImageCounts(
                image=truth.name,
                tp=result.counts.tp,
                fp=result.counts.fp,
                fn=result.counts.fn,
                mean_box_iou=float(np.mean([p[2] for p in result.pairs])) if result.pairs else 0.0,
                instance_miou=instance_miou(pairs),
                semantic_miou=sem,
            )
        )
    p, r, f1 = precision_recall_f1(total)
    report = EvalReport(
        precision=p,
        recall=r,
        f1=f1,
        mean_box_iou=float(np.mean(box_ious)) if box_ious else 0.0,
        instance_miou=instance_miou(mask_pairs),
        semantic_miou_branch=float(np.mean(semantic)) if semantic else 0.0,
        images=per_image,
    )
    logger.info(
        f"Evaluated {len(truths)} images: TP={total.tp} FP={total.fp} FN={total.fn} "
        f"F1={f1:.4f}"
    )
    return report

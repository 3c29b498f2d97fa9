from dataclasses import dataclass

import numpy as np
import pytest

from core.errors import ConfigurationError
from metrics.evaluation import (
    ImagePrediction,
    ImageTruth,
    MatchCounts,
    box_iou,
    evaluate,
    instance_miou,
    mask_iou,
    match_detections,
    precision_recall_f1,
    semantic_miou,
)
from metrics.report import format_table, write_report


@dataclass
class Scored:
    box: tuple[float, float, float, float]
    score: float


def _pixels(box):
    x, y, w, h = box
    return {(i, j) for i in range(x, x + w) for j in range(y, y + h)}


def test_box_iou_examples():
    assert box_iou((1, 1, 4, 4), (1, 1, 4, 4)) == 1.0
    assert box_iou((0, 0, 2, 2), (5, 5, 2, 2)) == 0.0
    assert box_iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(0.142857, abs=1e-6)


def test_box_iou_matches_pixel_enumeration(rng):
    for _ in range(200):
        a = tuple(int(v) for v in (*rng.integers(0, 10, 2), *rng.integers(1, 8, 2)))
        b = tuple(int(v) for v in (*rng.integers(0, 10, 2), *rng.integers(1, 8, 2)))
        pa, pb = _pixels(a), _pixels(b)
        assert box_iou(a, b) == pytest.approx(len(pa & pb) / len(pa | pb), abs=1e-9)


def test_match_examples():
    gts = [(0, 0, 10, 10), (20, 20, 10, 10)]
    exact = match_detections([Scored(g, 0.9) for g in gts], gts)
    assert exact.counts == MatchCounts(tp=2, fp=0, fn=0)
    assert match_detections([], gts).counts == MatchCounts(tp=0, fp=0, fn=2)
    overlapping = [Scored((0, 0, 10, 10), 0.9), Scored((1, 0, 10, 10), 0.8)]
    two_on_one = match_detections(overlapping, gts[:1])
    assert two_on_one.counts == MatchCounts(tp=1, fp=1, fn=0)
    assert two_on_one.pairs[0][:2] == (0, 0)


def test_match_prefers_higher_score():
    gts = [(0, 0, 10, 10)]
    low = Scored((0, 0, 10, 10), 0.3)
    high = Scored((1, 1, 10, 10), 0.9)
    result = match_detections([low, high], gts)
    assert result.pairs[0][0] == 1


def _oracle_counts(dets, gts, thr):
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = set()
    tp = 0
    for d in order:
        best, best_iou = None, -1.0
        for g in range(len(gts)):
            if g in taken:
                continue
            pd, pg = _pixels(dets[d].box), _pixels(gts[g])
            iou = len(pd & pg) / len(pd | pg)
            if iou > best_iou:
                best, best_iou = g, iou
        if best is not None and best_iou >= thr:
            taken.add(best)
            tp += 1
    return tp, len(dets) - tp, len(gts) - tp


def test_matching_agrees_with_oracle(rng):
    for _ in range(200):
        gts = [
            tuple(int(v) for v in (*rng.integers(0, 12, 2), *rng.integers(2, 6, 2)))
            for _ in range(int(rng.integers(0, 4)))
        ]
        dets = [
            Scored(
                tuple(int(v) for v in (*rng.integers(0, 12, 2), *rng.integers(2, 6, 2))),
                float(rng.random()),
            )
            for _ in range(int(rng.integers(0, 4)))
        ]
        c = match_detections(dets, gts, 0.3).counts
        assert (c.tp, c.fp, c.fn) == _oracle_counts(dets, gts, 0.3)


def test_precision_recall_f1():
    p, r, f1 = precision_recall_f1(MatchCounts(tp=8, fp=2, fn=4))
    assert (p, r, f1) == pytest.approx((0.8, 0.666667, 0.727273), abs=1e-6)
    assert precision_recall_f1(MatchCounts()) == (0.0, 0.0, 0.0)
    assert precision_recall_f1(MatchCounts(tp=5)) == (1.0, 1.0, 1.0)


def test_semantic_miou_examples():
    gt = np.array([[1, 0], [1, 0]])
    pred = np.array([[1, 1], [0, 0]])
    assert semantic_miou(gt, gt) == 1.0
    assert semantic_miou(1 - gt, gt) == 0.0
    assert semantic_miou(pred, gt) == pytest.approx(1 / 3)
    with pytest.raises(ConfigurationError):
        semantic_miou(pred, np.zeros((3, 3)))


def test_semantic_miou_matches_enumeration(rng):
    for _ in range(200):
        gt = rng.integers(0, 2, (4, 5))
        pred = rng.integers(0, 2, (4, 5))
        ious = []
        for c in (0, 1):
            inter = union = 0
            for g, p in zip(gt.reshape(-1), pred.reshape(-1)):
                inter += int(g == c and p == c)
                union += int(g == c or p == c)
            ious.append(1.0 if union == 0 else inter / union)
        assert semantic_miou(pred, gt) == pytest.approx(sum(ious) / 2, abs=1e-9)


def test_instance_miou():
    a = np.zeros((5, 5), np.uint8)
    a[:, :3] = 1
    b = np.zeros((5, 5), np.uint8)
    b[:, :5] = 1
    assert mask_iou(a, b) == pytest.approx(0.6)
    c = np.zeros((5, 5), np.uint8)
    c[:4, :] = 1
    assert mask_iou(c, b) == pytest.approx(0.8)
    assert instance_miou([(a, b), (c, b)]) == pytest.approx(0.7)
    assert instance_miou([(b, b)]) == 1.0
    assert instance_miou([]) == 0.0


def _truth():
    mask = np.zeros((20, 20), np.uint8)
    mask[2:8, 2:8] = 1
    branch = np.zeros((20, 20), np.uint8)
    branch[15:] = 1
    return ImageTruth(name="im", boxes=[(2.0, 2.0, 6.0, 6.0)], masks=[mask], branch_map=branch)


def test_evaluate_perfect_prediction(tmp_path):
    truth = _truth()
    pred = ImagePrediction(
        detections=[Scored(truth.boxes[0], 1.0)],
        rendered_masks=[truth.masks[0]],
        branch_map=truth.branch_map,
    )
    report = evaluate([truth], [pred])
    assert report.f1 == 1.0
    assert report.mean_box_iou == 1.0
    assert report.instance_miou == 1.0
    assert report.semantic_miou_branch == 1.0
    assert report.images[0].tp == 1
    json_path, table_path = write_report(report, tmp_path)
    assert json_path.is_file()
    assert "1.000" in table_path.read_text()


def test_evaluate_counts_misses():
    truth = _truth()
    pred = ImagePrediction(
        detections=[Scored((12.0, 0.0, 4.0, 4.0), 0.9)], rendered_masks=[None], branch_map=None
    )
    report = evaluate([truth], [pred])
    assert (report.images[0].tp, report.images[0].fp, report.images[0].fn) == (0, 1, 1)
    assert report.f1 == 0.0
    assert report.semantic_miou_branch == 0.0
    with pytest.raises(ConfigurationError):
        evaluate([truth], [])


def test_format_table_columns():
    report = evaluate([_truth()], [ImagePrediction([], [], None)])
    table = format_table(report)
    for column in ("F1", "IoU", "MIoU", "MIoU_branch"):
        assert column in table
    assert "0.000" in table

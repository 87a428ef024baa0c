"""
Fast paths against straightforward reference implementations on many small
random instances.
"""
import math

import numpy as np
import pytest

from facessd.anchors import Box, DefaultBoxGrid, iou, match
from facessd.infer import nms
from facessd.losses import recycle_hard_samples, select_hard_negatives
from facessd.metrics import ScoredOutcome, average_precision, equal_error_rate, match_detections_to_gt, va_metrics
from facessd.models import Detection

INSTANCES = 1000
GRID = DefaultBoxGrid(sizes=(3, 2, 1), sides=(0.2, 0.4, 0.8))


def random_box(rng, lo=0.05, hi=0.5):
    w, h = rng.uniform(lo, hi, size=2)
    return Box(float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.1, 0.9)), float(w), float(h))


def random_detection(rng, scale=1, location=(0, 0)):
    return Detection(
        box=random_box(rng, 0.1, 0.4), face_score=float(np.round(rng.random(), 2)), scale=scale, location=location
    )


# -- references ----------------------------------------------------------------------------

def reference_match(gts, grid, threshold):
    boxes = [grid.box(i) for i in range(grid.num_locations)]
    overlaps = [[iou(g, d) for d in boxes] for g in gts]
    positive = [False] * len(boxes)
    gt_index = [-1] * len(boxes)
    for loc in range(len(boxes)):
        best, best_g = -1.0, -1
        for g in range(len(gts)):
            if overlaps[g][loc] > best:
                best, best_g = overlaps[g][loc], g
        if best_g >= 0 and best >= threshold:
            positive[loc], gt_index[loc] = True, best_g
    claimed = set()
    for g in sorted(range(len(gts)), key=lambda g: (-max(overlaps[g]), g)):
        best, best_loc = -2.0, -1
        for loc in range(len(boxes)):
            value = -1.0 if loc in claimed else overlaps[g][loc]
            if value > best:
                best, best_loc = value, loc
        claimed.add(best_loc)
        positive[best_loc], gt_index[best_loc] = True, g
    return positive, gt_index


def reference_nms(cands, overlap):
    ordered = sorted(cands, key=lambda d: (-d.face_score, d.scale, d.location))
    kept = []
    for cand in ordered:
        if all(iou(k.box, cand.box) < overlap for k in kept):
            kept.append(cand)
    return kept


def reference_ap(outcomes, total_gt):
    thresholds = sorted({o.score for o in outcomes}, reverse=True)
    points = []
    for t in thresholds:
        accepted = [o for o in outcomes if o.score >= t]
        tp = sum(o.is_true_positive for o in accepted)
        points.append((tp / total_gt, tp / len(accepted)))
    ap, previous_recall = 0.0, 0.0
    for i, (recall, _) in enumerate(points):
        ap += (recall - previous_recall) * max(p for _, p in points[i:])
        previous_recall = recall
    return ap


def reference_eer(pos, neg):
    thresholds = sorted(set(pos) | set(neg)) + [math.inf]
    rates = []
    for t in thresholds:
        far = sum(1 for s in neg if s >= t) / len(neg)
        frr = sum(1 for s in pos if s < t) / len(pos)
        rates.append((far, frr))
    for (far_a, frr_a), (far_b, frr_b) in zip(rates, rates[1:]):
        if far_b == frr_b:
            return far_b
        if far_a > frr_a and far_b < frr_b:
            # intersect the two segments
            alpha = (far_a - frr_a) / ((far_a - frr_a) - (far_b - frr_b))
            return far_a + alpha * (far_b - far_a)
    raise AssertionError("no crossing")


def reference_greedy(dets, gts, iou_min):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].face_score, i))
    used = set()
    result = []
    for i in order:
        choice = None
        for j, g in enumerate(gts):
            if j in used:
                continue
            value = iou(dets[i].box, g)
            if value >= iou_min and (choice is None or value > iou(dets[i].box, gts[choice])):
                choice = j
        if choice is not None:
            used.add(choice)
        result.append((i, choice))
    return result


def reference_va(pred, gt):
    n = len(pred)
    mp, mg = sum(pred) / n, sum(gt) / n
    vp = sum((p - mp) ** 2 for p in pred) / n
    vg = sum((g - mg) ** 2 for g in gt) / n
    cov = sum((p - mp) * (g - mg) for p, g in zip(pred, gt)) / n
    rmse = math.sqrt(sum((p - g) ** 2 for p, g in zip(pred, gt)) / n)
    sagr = sum(1 for p, g in zip(pred, gt) if (p >= 0) == (g >= 0)) / n
    return rmse, cov / math.sqrt(vp * vg), sagr, 2 * cov / (vp + vg + (mp - mg) ** 2)


# -- equivalence ---------------------------------------------------------------------------

def test_matching_equals_reference():
    rng = np.random.default_rng(100)
    for _ in range(INSTANCES):
        gts = [random_box(rng) for _ in range(int(rng.integers(1, 4)))]
        threshold = float(rng.choice([0.35, 0.5]))
        assignment = match(gts, GRID, threshold)
        positive, gt_index = reference_match(gts, GRID, threshold)
        assert assignment.positive.tolist() == positive
        assert assignment.gt_index.tolist() == gt_index


def test_nms_equals_reference():
    rng = np.random.default_rng(101)
    for _ in range(INSTANCES):
        cands = [
            random_detection(rng, scale=int(rng.integers(1, 4)), location=(int(rng.integers(3)), int(rng.integers(3))))
            for _ in range(int(rng.integers(0, 11)))
        ]
        overlap = float(rng.uniform(0.2, 0.6))
        assert nms(cands, overlap) == reference_nms(cands, overlap)


def test_average_precision_equals_reference():
    rng = np.random.default_rng(102)
    for _ in range(INSTANCES):
        n = int(rng.integers(1, 11))
        outcomes = [ScoredOutcome(float(np.round(rng.random(), 1)), bool(rng.random() < 0.5)) for _ in range(n)]
        total_gt = sum(o.is_true_positive for o in outcomes) + int(rng.integers(0, 3))
        if total_gt == 0:
            continue
        assert average_precision(outcomes, total_gt) == pytest.approx(reference_ap(outcomes, total_gt), abs=1e-12)


def test_equal_error_rate_equals_reference():
    rng = np.random.default_rng(103)
    for _ in range(INSTANCES):
        pos = np.round(rng.uniform(0.2, 1.0, size=int(rng.integers(1, 6))), 2).tolist()
        neg = np.round(rng.uniform(0.0, 0.8, size=int(rng.integers(1, 6))), 2).tolist()
        assert equal_error_rate(pos, neg) == pytest.approx(reference_eer(pos, neg), abs=1e-9)


def test_greedy_matching_equals_reference():
    rng = np.random.default_rng(104)
    for _ in range(INSTANCES):
        dets = [random_detection(rng) for _ in range(int(rng.integers(0, 6)))]
        gts = [random_box(rng, 0.1, 0.4) for _ in range(int(rng.integers(0, 5)))]
        outcomes = match_detections_to_gt(dets, gts, 0.5)
        assert [(o.detection_index, o.gt_index) for o in outcomes] == reference_greedy(dets, gts, 0.5)


def test_hard_negative_selection_equals_full_sort():
    rng = np.random.default_rng(105)
    for _ in range(INSTANCES):
        losses = np.round(rng.random(int(rng.integers(0, 11))), 1)
        num_pos = int(rng.integers(0, 4))
        ratio = float(rng.choice([1.0, 2.0, 3.0]))
        expected = sorted(range(len(losses)), key=lambda i: (-losses[i], i))[:min(int(ratio * num_pos), len(losses))]
        assert select_hard_negatives(losses, num_pos, ratio).tolist() == expected


def test_recycling_equals_full_sort():
    rng = np.random.default_rng(106)
    for _ in range(INSTANCES):
        losses = np.round(rng.random(int(rng.integers(1, 11))), 1).tolist()
        count = math.ceil(0.3 * len(losses) - 1e-9)
        expected = sorted(range(len(losses)), key=lambda i: (-losses[i], i))[:count]
        assert recycle_hard_samples(losses, 0.3) == expected


def test_va_metrics_equal_reference():
    rng = np.random.default_rng(107)
    for _ in range(INSTANCES):
        n = int(rng.integers(2, 11))
        pred = rng.uniform(-1, 1, size=n).tolist()
        gt = rng.uniform(-1, 1, size=n).tolist()
        scores = va_metrics(pred, gt)
        rmse, corr, sagr, ccc = reference_va(pred, gt)
        assert scores.rmse == pytest.approx(rmse, abs=1e-9)
        assert scores.corr == pytest.approx(corr, abs=1e-9)
        assert scores.sagr == pytest.approx(sagr, abs=1e-9)
        assert scores.ccc == pytest.approx(ccc, abs=1e-9)

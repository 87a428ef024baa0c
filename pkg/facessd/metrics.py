"""
Evaluation metrics.

Face detection: greedy matching at IoU 0.5, average precision (all-points
interpolation) and equal error rate. Face analysis: task accuracy counting an
undetected face as predicted 0, and RMSE / CORR / SAGR / CCC for valence and
arousal.
"""
import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .anchors import Box, iou
from .errors import DomainError, ShapeError
from .models import Detection, VAReport, VAScores

logger = logging.getLogger("facessd.metrics")


class ScoredOutcome(NamedTuple):
    """One detection after matching against the ground truth of its image."""
    score: float
    is_true_positive: bool
    gt_index: Optional[int] = None
    detection_index: int = -1


def _box_of(item) -> Box:
    if isinstance(item, Detection):
        return Box(*item.box)
    if hasattr(item, "box"):
        return Box(*item.box)
    return Box(*item)


def match_detections_to_gt(dets: Sequence, gts: Sequence, iou_min: float = 0.5) -> List[ScoredOutcome]:
    """
    Greedy matching in order of descending score (stable for equal scores).

    A detection is a true positive when its best-overlapping still-unmatched
    ground truth reaches ``iou_min``; each ground truth is used at most once.
    Outcomes come back in processing order.
    """
    gt_boxes = [_box_of(g) for g in gts]
    order = sorted(range(len(dets)), key=lambda i: -float(dets[i].face_score))
    used = [False] * len(gt_boxes)
    outcomes = []
    for i in order:
        det_box = _box_of(dets[i])
        best_j, best_iou = None, iou_min
        for j, gt_box in enumerate(gt_boxes):
            if used[j]:
                continue
            overlap = iou(det_box, gt_box)
            if overlap >= best_iou and (best_j is None or overlap > best_iou):
                best_j, best_iou = j, overlap
        if best_j is not None:
            used[best_j] = True
        outcomes.append(ScoredOutcome(float(dets[i].face_score), best_j is not None, best_j, i))
    return outcomes


def average_precision(outcomes: Sequence[ScoredOutcome], total_gt: int) -> float:
    """
    Area under the precision envelope.

    Outcomes with equal scores enter the ranking together, so the curve has one
    point per distinct score.
    """
    if total_gt < 0:
        raise DomainError(f"total_gt must be >= 0, got {total_gt}")
    if total_gt == 0 or not outcomes:
        return 0.0
    scores = np.array([o.score for o in outcomes], dtype=np.float64)
    hits = np.array([o.is_true_positive for o in outcomes], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]

    # last index of every run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    tp = np.cumsum(hits)[ends]
    detected = ends + 1.0
    precision = tp / detected
    recall = tp / total_gt

    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def roc_points(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> List[Tuple[float, float, float]]:
    """
    (threshold, false accept rate, false reject rate) at every observed score
    plus +inf. A score is accepted when it is >= the threshold.
    """
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise DomainError("ROC points need at least one positive and one negative score")
    thresholds = np.append(np.unique(np.concatenate([pos, neg])), np.inf)
    points = []
    for t in thresholds:
        far = float(np.mean(neg >= t))
        frr = float(np.mean(pos < t))
        points.append((float(t), far, frr))
    return points


def equal_error_rate(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> float:
    """
    Rate at which false accepts equal false rejects, interpolating linearly
    between the two operating points where FAR - FRR changes sign.

    Raises:
        DomainError: if either list is empty
    """
    points = roc_points(scores_pos, scores_neg)
    prev = None
    for t, far, frr in points:
        diff = far - frr
        if diff == 0:
            return far
        if diff < 0:
            p_far, p_frr = prev[1], prev[2]
            p_diff = p_far - p_frr
            alpha = p_diff / (p_diff - diff)
            return float(p_far + alpha * (far - p_far))
        prev = (t, far, frr)
    # unreachable: the +inf threshold always has FAR 0 and FRR 1
    return 1.0


def detection_scores(
    per_image: Sequence[Tuple[Sequence[Detection], Sequence]],
    iou_min: float = 0.5
) -> Tuple[List[ScoredOutcome], int, List[float], List[float]]:
    """
    Match every image and pool the results.

    Returns (outcomes, total_gt, positive scores, negative scores); missed
    ground truths enter the positive scores with score 0 so they count as
    rejected at every threshold above 0.
    """
    outcomes: List[ScoredOutcome] = []
    total_gt = 0
    pos: List[float] = []
    neg: List[float] = []
    for dets, gts in per_image:
        image_outcomes = match_detections_to_gt(dets, gts, iou_min)
        outcomes.extend(image_outcomes)
        total_gt += len(gts)
        hits = 0
        for outcome in image_outcomes:
            if outcome.is_true_positive:
                pos.append(outcome.score)
                hits += 1
            else:
                neg.append(outcome.score)
        pos.extend([0.0] * (len(gts) - hits))
    return outcomes, total_gt, pos, neg


def detection_report(
    per_image: Sequence[Tuple[Sequence[Detection], Sequence]],
    iou_min: float = 0.5
) -> Dict[str, float]:
    """ap and eer over a dataset; eer is 0 when there are no false positives and every face is found."""
    outcomes, total_gt, pos, neg = detection_scores(per_image, iou_min)
    report = {
        "ap": average_precision(outcomes, total_gt),
        "num_gt": float(total_gt),
        "num_detections": float(len(outcomes)),
        "num_true_positive": float(sum(o.is_true_positive for o in outcomes)),
    }
    if pos and neg:
        report["eer"] = equal_error_rate(pos, neg)
    elif pos:
        report["eer"] = 0.0 if min(pos) > 0 else 1.0
    else:
        report["eer"] = 1.0 if neg else 0.0
    return report


# -- task accuracy ---------------------------------------------------------------------------

def gt_predictions(
    dets: Sequence[Detection],
    gts: Sequence,
    planes: slice,
    iou_min: float = 0.5
) -> List[Optional[List[int]]]:
    """Predicted bits of ``planes`` for every ground truth; None where no detection matched it."""
    predicted: List[Optional[List[int]]] = [None] * len(gts)
    for outcome in match_detections_to_gt(dets, gts, iou_min):
        if outcome.is_true_positive:
            bits = dets[outcome.detection_index].task_bits or []
            predicted[outcome.gt_index] = [int(b or 0) for b in bits[planes]]
    return predicted


def task_accuracy(predicted: Sequence[Optional[Sequence[int]]], labels: Sequence[Sequence[int]]) -> float:
    """
    Fraction of correct bits over all ground-truth faces; an undetected face
    (None) is predicted all zeros. With several attributes this is the mean of
    the per-attribute accuracies.
    """
    per_attribute = per_attribute_accuracy(predicted, labels)
    if not per_attribute:
        return 0.0
    return float(np.mean(per_attribute))


def per_attribute_accuracy(predicted: Sequence[Optional[Sequence[int]]], labels: Sequence[Sequence[int]]) -> List[float]:
    if len(predicted) != len(labels):
        raise ShapeError(f"{len(predicted)} predictions for {len(labels)} faces")
    if not labels:
        return []
    label_array = np.asarray([list(l) for l in labels], dtype=np.int64)
    width = label_array.shape[1]
    pred_array = np.zeros_like(label_array)
    for i, bits in enumerate(predicted):
        if bits is None:
            continue
        if len(bits) != width:
            raise ShapeError(f"face {i}: {len(bits)} predicted bits, {width} labels")
        pred_array[i] = bits
    return [float(v) for v in np.mean(pred_array == label_array, axis=0)]


# -- valence / arousal --------------------------------------------------------------------

def va_metrics(pred: Sequence[float], gt: Sequence[float]) -> VAScores:
    """
    RMSE, Pearson correlation, sign agreement (sign(0) counts as positive) and
    concordance correlation, all with population moments.

    CCC uses the covariance form and stays defined when one side is constant
    (a constant prediction against varying ground truth scores 0). Pearson
    correlation is undefined there and is reported as None.

    Raises:
        DomainError: fewer than two values, or both sides the same constant
            (CCC undefined)
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 1:
        raise ShapeError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    if p.size < 2:
        raise DomainError("valence-arousal metrics need at least two values")

    rmse = math.sqrt(float(np.mean((p - g) ** 2)))
    mp, mg = p.mean(), g.mean()
    vp, vg = p.var(), g.var()
    cov = float(np.mean((p - mp) * (g - mg)))
    denom = vp + vg + (mp - mg) ** 2
    if denom <= 0:
        raise DomainError("concordance undefined when predictions and ground truth are the same constant")

    corr = None
    if vp > 0 and vg > 0:
        corr = float(np.clip(cov / math.sqrt(vp * vg), -1.0, 1.0))
    else:
        logger.warning(f"CORR UNDEFINED | var_pred={vp:g} | var_gt={vg:g}")
    return VAScores(
        rmse=rmse,
        corr=corr,
        sagr=float(np.mean((p >= 0) == (g >= 0))),
        ccc=float(np.clip(2.0 * cov / denom, -1.0, 1.0)),
    )


def concordance(pred: Sequence[float], gt: Sequence[float]) -> float:
    """CCC alone; defined for constant inputs (1 when both are equal constants)."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.size == 0:
        raise ShapeError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    cov = float(np.mean((p - p.mean()) * (g - g.mean())))
    denom = p.var() + g.var() + (p.mean() - g.mean()) ** 2
    return 2.0 * cov / denom if denom > 0 else 1.0


def va_report(pred: np.ndarray, gt: np.ndarray) -> VAReport:
    """``pred``/``gt`` are [N, 2] arrays of (valence, arousal)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    return VAReport(valence=va_metrics(pred[:, 0], gt[:, 0]), arousal=va_metrics(pred[:, 1], gt[:, 1]))


# -- report files -----------------------------------------------------------------------------

def write_report(
    metrics: Dict[str, float],
    path: Union[str, Path],
    roc: Optional[Sequence[Tuple[float, float, float]]] = None
) -> List[Path]:
    """
    Write ``<path>.txt`` (key: value lines) and ``<path>.csv`` (key,value rows);
    ROC points, when given, go to ``<path>_roc.csv``.
    """
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted(metrics)
    txt = base.with_suffix(".txt")
    txt.write_text("".join(f"{k}: {metrics[k]!r}\n" for k in keys), encoding="utf-8")

    table = base.with_suffix(".csv")
    with open(table, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        for k in keys:
            writer.writerow([k, repr(metrics[k])])
    written = [txt, table]

    if roc is not None:
        roc_path = base.with_name(base.stem + "_roc.csv")
        with open(roc_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "far", "frr"])
            for t, far, frr in roc:
                writer.writerow([repr(t), repr(far), repr(frr)])
        written.append(roc_path)
    logger.info(f"REPORT | path={base} | keys={len(keys)}")
    return written

"""
Inference: heatmap volumes to final detections.

Locations whose face confidence exceeds th_face become candidates, their
offsets are decoded against the default boxes, greedy NMS runs once across all
scales, and the task planes are read out at each surviving location.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .anchors import Box, DefaultBoxGrid, decode, iou
from .errors import ConfigError, ShapeError
from .metrics import match_detections_to_gt
from .models import Activation, Detection, HeadConfig, InferenceConfig, TaskName
from .tensor import Tensor, no_grad

logger = logging.getLogger("facessd.infer")

OFFSET_PLANES = ("cx", "cy", "w", "h")


def _check_geometry(volumes, grid: DefaultBoxGrid) -> None:
    if len(volumes) != grid.num_scales:
        raise ShapeError(f"{len(volumes)} volumes for a grid of {grid.num_scales} scales")
    for volume, size in zip(volumes, grid.sizes):
        if volume.size != size:
            raise ShapeError(f"scale {volume.scale} is {volume.size}x{volume.size}, grid expects {size}")


def candidates(volumes, grid: DefaultBoxGrid, th_face: float) -> List[Detection]:
    """One detection per location whose face confidence is strictly above th_face."""
    _check_geometry(volumes, grid)
    found = []
    for s, volume in enumerate(volumes):
        face = volume.face.data
        rows, cols = np.nonzero(face > th_face)
        base = int(grid.offsets[s])
        size = grid.sizes[s]
        for r, c in zip(rows.tolist(), cols.tolist()):
            offsets = volume.offsets.data[:, r, c]
            default = grid.box(base + r * size + c)
            task_scores = volume.tasks.data[:, r, c].tolist() if volume.tasks is not None else []
            found.append(Detection(
                box=decode(offsets.tolist(), default),
                face_score=float(face[r, c]),
                task_scores=[float(v) for v in task_scores],
                scale=volume.scale,
                location=(r, c),
            ))
    return found


def _rank_key(det: Detection):
    return (-det.face_score, det.scale, det.location[0], det.location[1])


def nms(cands: Sequence[Detection], overlap: float = 0.35) -> List[Detection]:
    """
    Greedy suppression: keep the best remaining detection and drop every other
    one whose IoU with it is >= overlap. Ties in score go to the lower
    (scale, row, col).
    """
    if not 0 < overlap < 1:
        raise ConfigError(f"NMS overlap must lie in (0, 1), got {overlap}")
    remaining = sorted(cands, key=_rank_key)
    kept: List[Detection] = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [d for d in remaining if iou(best.box, d.box) < overlap]
    return kept


def apply_task_thresholds(det: Detection, head: HeadConfig, th_t: float) -> Detection:
    """Binary planes get a bit (score >= th_t); regression planes keep raw values and a None bit."""
    bits: List[Optional[int]] = [None] * len(det.task_scores)
    for seg in head.segments():
        if seg.activation != Activation.SIGMOID:
            continue
        for i in range(seg.start, min(seg.stop, len(det.task_scores))):
            bits[i] = int(det.task_scores[i] >= th_t)
    return det.model_copy(update={"task_bits": bits})


def finalize(
    cands: Sequence[Detection],
    head: HeadConfig,
    cfg: InferenceConfig
) -> List[Detection]:
    """NMS, box clamping for reporting, task decisions."""
    kept = nms(cands, cfg.nms_overlap)
    out = []
    for det in kept:
        det = det.model_copy(update={"box": Box(*det.box).clamped()})
        out.append(apply_task_thresholds(det, head, cfg.th_t))
    return out


def run_model(model, image: np.ndarray):
    """Forward pass without recording a tape."""
    with no_grad():
        return model.forward(Tensor(image))


def detect(
    model,
    image: np.ndarray,
    grid: Optional[DefaultBoxGrid] = None,
    th_face: Optional[float] = None,
    th_t: Optional[float] = None,
    cfg: Optional[InferenceConfig] = None
) -> List[Detection]:
    """
    Detect faces in one normalized [3, 300, 300] image.

    Explicit th_face / th_t override the values in ``cfg``.
    """
    cfg = cfg or InferenceConfig()
    updates = {k: v for k, v in (("th_face", th_face), ("th_t", th_t)) if v is not None}
    if updates:
        cfg = cfg.model_copy(update=updates)
    grid = grid or DefaultBoxGrid()
    volumes = run_model(model, image)
    return finalize(candidates(volumes, grid, cfg.th_face), model.head, cfg)


# -- heatmap dumps ---------------------------------------------------------------------

def task_plane_names(head: HeadConfig) -> List[str]:
    names = []
    for seg in head.segments():
        if seg.task == TaskName.SMILE:
            names.append("smile")
        elif seg.task == TaskName.ATTRIBUTES:
            names.extend(f"attr{i}" for i in range(seg.stop - seg.start))
        else:
            names.extend(["valence", "arousal"])
    return names


def to_gray(values: np.ndarray, activation: Activation) -> np.ndarray:
    """
    Sigmoid planes map [0, 1] to floor(v * 255 + 0.5); linear planes map
    [-1, 1] to floor((v + 1) * 127.5). Values are clamped first.
    """
    values = np.asarray(values, dtype=np.float64)
    if activation == Activation.SIGMOID:
        gray = np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5)
    else:
        gray = np.floor((np.clip(values, -1.0, 1.0) + 1.0) * 127.5)
    return np.clip(gray, 0, 255).astype(np.uint8)


def write_pgm(gray: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(gray)).save(path, format="PPM")
    return path


def dump_heatmaps(volumes, path_prefix: Union[str, Path], head: HeadConfig) -> List[Path]:
    """One 8-bit PGM per plane per scale, named ``<prefix>_s<scale>_<plane>.pgm``."""
    prefix = str(path_prefix)
    written = []
    task_names = task_plane_names(head)
    task_acts = []
    for seg in head.segments():
        task_acts.extend([seg.activation] * (seg.stop - seg.start))

    for volume in volumes:
        planes = []
        if volume.face is not None:
            planes.append(("face", volume.face.data, Activation.SIGMOID))
            planes.extend((name, volume.offsets.data[i], Activation.LINEAR) for i, name in enumerate(OFFSET_PLANES))
        if volume.tasks is not None:
            planes.extend(
                (task_names[i], volume.tasks.data[i], task_acts[i]) for i in range(volume.tasks.shape[0])
            )
        for name, values, activation in planes:
            written.append(write_pgm(to_gray(values, activation), f"{prefix}_s{volume.scale}_{name}.pgm"))
    logger.debug(f"HEATMAPS | prefix={prefix} | files={len(written)}")
    return written


# -- text output ---------------------------------------------------------------------------

def format_detections(image_id: str, detections: Sequence[Detection]) -> str:
    """One line per detection: image_id cx cy w h face_score task_scores..."""
    lines = []
    for det in detections:
        fields = [image_id] + [f"{v:.6f}" for v in det.box] + [f"{det.face_score:.6f}"]
        fields += [f"{v:.6f}" for v in det.task_scores]
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


# -- threshold tuning -----------------------------------------------------------------------

def tune_task_threshold(scores: Sequence[float], labels: Sequence[int], default: float = 0.5) -> Tuple[float, float]:
    """
    Threshold maximising binary accuracy of (score >= t) against labels.

    Candidates are the observed scores plus ``default``; ties go to the candidate
    closest to ``default``. Returns (threshold, accuracy).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores but {labels.size} labels")
    if scores.size == 0:
        return default, 0.0
    thresholds = np.unique(np.append(scores, default))
    accuracies = np.array([np.mean((scores >= t) == labels) for t in thresholds])
    best = accuracies.max()
    tied = thresholds[accuracies == best]
    threshold = float(tied[np.argmin(np.abs(tied - default))])
    return threshold, float(best)


def tune_face_threshold(
    per_image: Sequence[Tuple[Sequence[Detection], Sequence[Box]]],
    thresholds: Optional[Sequence[float]] = None,
    iou_min: float = 0.5
) -> Tuple[float, Dict[str, float]]:
    """
    Face threshold maximising detection F1 over a validation split.

    ``per_image`` holds NMS output computed at the lowest threshold of interest
    with the ground-truth boxes; raising the threshold only filters those lists.
    """
    thresholds = sorted(set(thresholds or np.round(np.arange(0.05, 0.96, 0.05), 2).tolist()))
    best_t, best = thresholds[0], {"f1": -1.0}
    for t in thresholds:
        tp = fp = 0
        total_gt = 0
        for dets, gts in per_image:
            kept = [d for d in dets if d.face_score > t]
            outcomes = match_detections_to_gt(kept, gts, iou_min)
            hits = sum(o.is_true_positive for o in outcomes)
            tp += hits
            fp += len(outcomes) - hits
            total_gt += len(gts)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / total_gt if total_gt else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        if f1 > best["f1"]:
            best_t, best = t, {"f1": f1, "precision": precision, "recall": recall}
    logger.info(f"TUNED | th_face={best_t} | f1={best['f1']:.4f}")
    return float(best_t), best

"""
Training objectives.

Face loss: (L_cls + lambda * L_reg) / N over matched default boxes, with BCE
classification and smooth-L1 offset regression. Analysis losses (smile,
attributes, valence-arousal) are evaluated at matched locations only and
combined as the L2 norm of the weighted per-task losses.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .anchors import MatchAssignment
from .errors import ConfigError, DomainError, ShapeError
from .models import FaceAnnotation, FaceLossConfig, HeadConfig, TaskName, TaskWeights
from .tensor import Tensor, concat

DEFAULT_EPS = 1e-7

ArrayLike = Union[Tensor, np.ndarray, Sequence[float], float]


# -- scalar forms ---------------------------------------------------------------

def smooth_l1(k: float) -> float:
    """0.5 k^2 inside |k| < 1, |k| - 0.5 outside."""
    a = abs(k)
    return 0.5 * k * k if a < 1.0 else a - 0.5


def bce(x: float, c: float, eps: float = DEFAULT_EPS) -> float:
    """Binary cross-entropy of label x against confidence c, with c clamped to [eps, 1 - eps]."""
    c = min(max(c, eps), 1.0 - eps)
    return -(x * math.log(c) + (1.0 - x) * math.log(1.0 - c))


# -- differentiable forms -------------------------------------------------------------

def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def smooth_l1_sum(diff: Tensor) -> Tensor:
    """Sum of smooth_l1 over every element; the subgradient at |k| = 1 is sign(k)."""
    d = diff.data
    a = np.abs(d)
    value = np.where(a < 1.0, 0.5 * d * d, a - 0.5).sum()

    def _backward(node, grad):
        return (grad * np.clip(node.inputs[0].data, -1.0, 1.0),)

    return Tensor.from_op(np.asarray(value), "smooth_l1", (diff,), _backward)


def bce_elements(c: Tensor, x, eps: float = DEFAULT_EPS) -> Tensor:
    """
    Per-element BCE. Confidences outside [eps, 1 - eps] are clamped and get
    zero gradient.
    """
    labels = np.asarray(x, dtype=c.data.dtype)
    if labels.shape != c.shape:
        raise ShapeError(f"labels {labels.shape} do not match confidences {c.shape}")
    clipped = np.clip(c.data, eps, 1.0 - eps)
    inside = (c.data >= eps) & (c.data <= 1.0 - eps)
    value = -(labels * np.log(clipped) + (1.0 - labels) * np.log(1.0 - clipped))

    def _backward(node, grad):
        slope = (clipped - labels) / (clipped * (1.0 - clipped))
        return (np.where(inside, grad * slope, 0.0),)

    return Tensor.from_op(value, "bce", (c,), _backward)


# -- hard negative mining --------------------------------------------------------------

def select_hard_negatives(losses_at_negatives, num_pos: int, ratio: float) -> np.ndarray:
    """
    Indices of the floor(ratio * num_pos) highest-loss negatives (capped at the
    number of negatives), by descending loss; equal losses keep index order.
    """
    if ratio <= 0:
        raise ConfigError(f"neg_pos_ratio must be > 0, got {ratio}")
    losses = np.asarray(losses_at_negatives, dtype=np.float64).reshape(-1)
    count = min(int(math.floor(ratio * num_pos + 1e-9)), losses.size)
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-losses, kind="stable")
    return order[:count].astype(np.int64)


def recycle_hard_samples(batch_losses: Sequence[float], fraction: float) -> List[int]:
    """Indices of the ceil(fraction * B) highest-loss samples of a minibatch."""
    if not 0 < fraction < 1:
        raise ConfigError(f"recycling fraction must lie in (0, 1), got {fraction}")
    losses = np.asarray(batch_losses, dtype=np.float64).reshape(-1)
    if losses.size == 0:
        return []
    count = min(losses.size, math.ceil(fraction * losses.size - 1e-9))
    order = np.argsort(-losses, kind="stable")
    return [int(i) for i in order[:count]]


# -- face loss ---------------------------------------------------------------------------

@dataclass
class FaceLossTerms:
    """
    Face loss and its parts.

    ``cls`` and ``reg`` are already divided by N, so total = cls + lambda * reg.
    """
    total: Tensor
    cls: float = 0.0
    reg: float = 0.0
    num_positive: int = 0
    num_negative: int = 0


def flatten_face_maps(volumes) -> Tuple[Tensor, Tensor]:
    """Face planes as [L] and offset planes as [4, L] in (scale, row, col) order."""
    faces = concat([v.face.reshape(-1) for v in volumes], axis=0)
    offsets = concat([v.offsets.reshape(4, -1) for v in volumes], axis=1)
    return faces, offsets


def flatten_task_maps(volumes) -> Tensor:
    return concat([v.tasks.reshape(v.tasks.shape[0], -1) for v in volumes], axis=1)


def face_loss_terms(
    match: MatchAssignment,
    face_maps: Tensor,
    offset_maps: Tensor,
    cfg: Optional[FaceLossConfig] = None
) -> FaceLossTerms:
    """
    Face loss over flattened maps.

    Args:
        match: matching result for the sample
        face_maps: [L] face confidences
        offset_maps: [4, L] predicted offsets
        cfg: loss settings

    Returns:
        FaceLossTerms; with no positives the total is a constant 0
    """
    cfg = cfg or FaceLossConfig()
    L = match.num_locations
    if face_maps.shape != (L,) or offset_maps.shape != (4, L):
        raise ShapeError(
            f"maps {face_maps.shape}/{offset_maps.shape} do not match {L} matched locations"
        )
    N = match.num_positive
    if N == 0:
        return FaceLossTerms(total=Tensor(0.0))

    pos_idx = np.flatnonzero(match.positive)
    neg_idx = np.flatnonzero(~match.positive)
    per_location = bce_elements(face_maps, match.positive.astype(np.float64), cfg.eps)

    if cfg.hard_negative_mining:
        chosen = select_hard_negatives(per_location.data[neg_idx], N, cfg.neg_pos_ratio)
        neg_sel = neg_idx[chosen]
    else:
        neg_sel = neg_idx
    selected = np.sort(np.concatenate([pos_idx, neg_sel]))
    l_cls = per_location.take(selected).sum()

    predicted = offset_maps.take(pos_idx, axis=1)
    targets = Tensor(match.targets[pos_idx].T)
    l_reg = smooth_l1_sum(predicted - targets)

    total = (l_cls + l_reg * cfg.lambda_) * (1.0 / N)
    return FaceLossTerms(
        total=total,
        cls=l_cls.item() / N,
        reg=l_reg.item() / N,
        num_positive=N,
        num_negative=int(neg_sel.size),
    )


def face_loss(match: MatchAssignment, face_maps, offset_maps, cfg: Optional[FaceLossConfig] = None) -> Tensor:
    """
    Face loss as a scalar tensor.

    ``face_maps``/``offset_maps`` may be the flattened [L] / [4, L] tensors or
    the list of heatmap volumes (then ``offset_maps`` is ignored).
    """
    if isinstance(face_maps, (list, tuple)):
        face_maps, offset_maps = flatten_face_maps(face_maps)
    return face_loss_terms(match, face_maps, offset_maps, cfg).total


# -- analysis losses --------------------------------------------------------------------

def _paired(pred: ArrayLike, labels, rows: Optional[int] = None):
    pred = _as_tensor(pred)
    labels = np.asarray(labels, dtype=pred.data.dtype)
    if labels.shape != pred.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match labels {labels.shape}")
    if rows is not None and (pred.ndim != 2 or pred.shape[0] != rows):
        raise ShapeError(f"expected {rows} rows, got shape {pred.shape}")
    if pred.size == 0:
        raise ShapeError("no locations to evaluate")
    return pred, labels


def smile_loss(x_e, e: ArrayLike, eps: float = DEFAULT_EPS) -> Tensor:
    """Mean BCE of smile confidences e against labels x_e over matched locations."""
    pred, labels = _paired(e, x_e)
    return bce_elements(pred, labels, eps).mean()


def attribute_loss(G, P: ArrayLike, eps: float = DEFAULT_EPS) -> Tensor:
    """
    Mean over attributes of BCE, averaged over matched locations.

    G and P share a shape: [N_a] for one location or [N_a, locations].
    """
    pred, labels = _paired(P, G)
    return bce_elements(pred, labels, eps).mean()


def va_loss(pred: ArrayLike, gt) -> Tensor:
    """
    E_v + E_a with E = (1 / 2N) sum of squared errors.

    Both arguments are [2, N] (valence row, arousal row); a flat vector of
    length 2N is read as valence values followed by arousal values.
    """
    pred = _as_tensor(pred)
    if pred.ndim == 1:
        if pred.size % 2:
            raise ShapeError(f"flat valence-arousal vectors need even length, got {pred.size}")
        pred = pred.reshape(2, pred.size // 2)
        gt = np.asarray(gt).reshape(2, -1)
    pred, labels = _paired(pred, gt, rows=2)
    n = pred.shape[1]
    return (pred - Tensor(labels)).square().sum() * (1.0 / (2.0 * n))


def multitask_total(losses: Sequence[ArrayLike], weights: Optional[TaskWeights] = None) -> Tensor:
    """sqrt(sum_t (w_t L_t)^2)."""
    if not losses:
        raise ShapeError("multitask_total needs at least one loss")
    weights = weights or TaskWeights.uniform(len(losses))
    if len(weights.w) != len(losses):
        raise ShapeError(f"{len(losses)} losses but {len(weights.w)} weights")
    total = None
    for loss, w in zip(losses, weights.w):
        loss = _as_tensor(loss)
        if loss.size != 1:
            raise ShapeError(f"task losses must be scalars, got shape {loss.shape}")
        if loss.item() < 0:
            raise DomainError(f"task losses must be >= 0, got {loss.item()}")
        term = (loss * w).square()
        total = term if total is None else total + term
    return total.sqrt()


# -- per-sample analysis objective --------------------------------------------------------

@dataclass
class AnalysisLossTerms:
    total: Tensor
    per_task: Dict[str, float] = field(default_factory=dict)
    num_positive: int = 0
    # one scalar per head segment, in head order; empty without matches
    task_losses: List[Tensor] = field(default_factory=list)


def task_labels(head: HeadConfig, faces: Sequence[FaceAnnotation], gt_index: np.ndarray) -> np.ndarray:
    """Label matrix [n, P] for the matched ground truths, rows laid out like the head."""
    rows = []
    for seg in head.segments():
        if seg.task == TaskName.SMILE:
            rows.append([[float(faces[g].smile) for g in gt_index]])
        elif seg.task == TaskName.ATTRIBUTES:
            block = []
            for g in gt_index:
                bits = faces[g].attributes
                if len(bits) != head.num_attributes:
                    raise ShapeError(f"face has {len(bits)} attribute bits, head expects {head.num_attributes}")
                block.append([float(b) for b in bits])
            rows.append(np.asarray(block).T.reshape(head.num_attributes, -1))
        else:
            rows.append([[faces[g].valence for g in gt_index], [faces[g].arousal for g in gt_index]])
    return np.concatenate([np.asarray(r, dtype=np.float64).reshape(-1, len(gt_index)) for r in rows], axis=0)


def analysis_loss(
    match: MatchAssignment,
    faces: Sequence[FaceAnnotation],
    task_maps: Tensor,
    head: HeadConfig,
    weights: Optional[TaskWeights] = None,
    eps: float = DEFAULT_EPS
) -> AnalysisLossTerms:
    """
    Task loss of one sample from its [n, L] task maps.

    Each configured task contributes its own loss over matched locations.
    ``total`` combines this sample's task losses with ``multitask_total`` and
    ranks samples for recycling; training combines ``task_losses`` across the
    batch with ``batch_task_loss``.
    """
    if task_maps.shape != (head.n_tasks, match.num_locations):
        raise ShapeError(f"task maps {task_maps.shape} do not match head n={head.n_tasks}, L={match.num_locations}")
    if match.num_positive == 0:
        return AnalysisLossTerms(total=Tensor(0.0))

    pos_idx = np.flatnonzero(match.positive)
    labels = task_labels(head, faces, match.gt_index[pos_idx])
    at_positives = task_maps.take(pos_idx, axis=1)

    losses = []
    per_task = {}
    for seg in head.segments():
        pred = at_positives.take(np.arange(seg.start, seg.stop), axis=0)
        target = labels[seg.start:seg.stop]
        if seg.task == TaskName.SMILE:
            loss = smile_loss(target, pred, eps)
        elif seg.task == TaskName.ATTRIBUTES:
            loss = attribute_loss(target, pred, eps)
        else:
            loss = va_loss(pred, target)
        losses.append(loss)
        per_task[seg.task.value] = loss.item()

    return AnalysisLossTerms(
        total=multitask_total(losses, weights),
        per_task=per_task,
        num_positive=int(pos_idx.size),
        task_losses=losses,
    )


def batch_task_loss(
    per_sample: Sequence[Sequence[Tensor]],
    batch_size: int,
    weights: Optional[TaskWeights] = None
) -> Tensor:
    """
    Minibatch analysis objective sqrt(sum_t (w_t * mean_b L_tb)^2).

    ``per_sample`` holds the task losses of each sample in head order; a sample
    without matched faces passes an empty list and counts as zero in every
    task mean.
    """
    if batch_size < 1 or len(per_sample) > batch_size:
        raise ShapeError(f"{len(per_sample)} samples for a batch of {batch_size}")
    present = [list(losses) for losses in per_sample if len(losses)]
    if not present:
        return Tensor(0.0)
    num_tasks = len(present[0])
    if any(len(losses) != num_tasks for losses in present):
        raise ShapeError("samples disagree on the number of task losses")

    means = []
    for t in range(num_tasks):
        total = _as_tensor(present[0][t])
        for losses in present[1:]:
            total = total + _as_tensor(losses[t])
        means.append(total * (1.0 / batch_size))
    return multitask_total(means, weights)

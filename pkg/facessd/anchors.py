"""
Default boxes, IoU, offset encoding and ground-truth matching.

One square default box per heatmap location; boxes are (cx, cy, w, h) in
coordinates normalised to the image side.
"""
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

FEATURE_SIZES: Tuple[int, ...] = (37, 18, 9, 5, 3, 1)
DEFAULT_SIDES: Tuple[float, ...] = (0.07, 0.15, 0.33, 0.51, 0.69, 0.87)

# decode clamps log-extents to this magnitude before exponentiating
MAX_LOG_EXTENT = 20.0


class Box(NamedTuple):
    """Face region in centre form, normalised to the image side."""
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def corners(self) -> Tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0, self.cy - self.h / 2.0,
            self.cx + self.w / 2.0, self.cy + self.h / 2.0
        )

    @property
    def area(self) -> float:
        return self.w * self.h

    def clamped(self, min_extent: float = 1e-6) -> "Box":
        """Clip to the unit square (for reporting only)."""
        x1, y1, x2, y2 = (min(max(v, 0.0), 1.0) for v in self.corners())
        w = max(x2 - x1, min_extent)
        h = max(y2 - y1, min_extent)
        return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, w, h)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2.0
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def iou(a: Box, b: Box) -> float:
    """Jaccard overlap of two boxes."""
    ax1, ay1, ax2, ay2 = Box(*a).corners()
    bx1, by1, bx2, by2 = Box(*b).corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between centre-form box arrays of shape (N, 4) and (M, 4)."""
    ca, cb = to_corners(a), to_corners(b)
    iw = np.clip(np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0]), 0.0, None)
    ih = np.clip(np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1]), 0.0, None)
    inter = iw * ih
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def encode(g: Box, d: Box) -> Tuple[float, float, float, float]:
    """Regression target of g relative to default box d."""
    if min(g[2], g[3], d[2], d[3]) <= 0:
        raise DomainError(f"box extents must be positive (g={tuple(g)}, d={tuple(d)})")
    return (
        (g[0] - d[0]) / d[2],
        (g[1] - d[1]) / d[3],
        math.log(g[2] / d[2]),
        math.log(g[3] / d[3]),
    )


def encode_boxes(g: np.ndarray, d: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(d, dtype=np.float64).reshape(-1, 4)
    if np.any(g[:, 2:] <= 0) or np.any(d[:, 2:] <= 0):
        raise DomainError("box extents must be positive")
    return np.stack([
        (g[:, 0] - d[:, 0]) / d[:, 2],
        (g[:, 1] - d[:, 1]) / d[:, 3],
        np.log(g[:, 2] / d[:, 2]),
        np.log(g[:, 3] / d[:, 3]),
    ], axis=1)


def decode(l: Sequence[float], d: Box) -> Box:
    """Inverse of encode."""
    lw = min(max(l[2], -MAX_LOG_EXTENT), MAX_LOG_EXTENT)
    lh = min(max(l[3], -MAX_LOG_EXTENT), MAX_LOG_EXTENT)
    return Box(
        d[0] + l[0] * d[2],
        d[1] + l[1] * d[3],
        d[2] * math.exp(lw),
        d[3] * math.exp(lh),
    )


def decode_boxes(l: np.ndarray, d: np.ndarray) -> np.ndarray:
    l = np.asarray(l, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(d, dtype=np.float64).reshape(-1, 4)
    extents = np.exp(np.clip(l[:, 2:], -MAX_LOG_EXTENT, MAX_LOG_EXTENT))
    return np.concatenate([d[:, :2] + l[:, :2] * d[:, 2:], d[:, 2:] * extents], axis=1)


class DefaultBoxGrid:
    """
    One square default box per location of every output scale.

    Locations are flattened in (scale, row, col) order; the box at (row, col)
    of scale s is centred at ((col + 0.5) / HM_s, (row + 0.5) / HM_s) with side a_s.
    """

    def __init__(
        self,
        sizes: Sequence[int] = FEATURE_SIZES,
        sides: Sequence[float] = DEFAULT_SIDES
    ):
        sizes = tuple(int(s) for s in sizes)
        sides = tuple(float(a) for a in sides)
        if len(sizes) != len(sides) or not sizes:
            raise ConfigError(f"need one box side per scale ({len(sizes)} sizes, {len(sides)} sides)")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"heatmap sizes must be >= 1, got {sizes}")
        if any(not 0 < a <= 1 for a in sides):
            raise ConfigError(f"box sides must lie in (0, 1], got {sides}")
        if any(b <= a for a, b in zip(sides, sides[1:])):
            raise ConfigError(f"box sides must increase with scale, got {sides}")

        self.sizes = sizes
        self.sides = sides

        blocks = []
        for size, side in zip(sizes, sides):
            centers = (np.arange(size) + 0.5) / size
            cy, cx = np.meshgrid(centers, centers, indexing="ij")
            block = np.stack([cx.ravel(), cy.ravel(), np.full(size * size, side), np.full(size * size, side)], axis=1)
            blocks.append(block)
        self.boxes = np.concatenate(blocks, axis=0)
        self.offsets = np.concatenate([[0], np.cumsum([s * s for s in sizes])])

    @property
    def num_scales(self) -> int:
        return len(self.sizes)

    @property
    def num_locations(self) -> int:
        return int(self.offsets[-1])

    def scale_slice(self, scale_index: int) -> slice:
        """Location range of a scale (0-based scale index)."""
        return slice(int(self.offsets[scale_index]), int(self.offsets[scale_index + 1]))

    def location(self, index: int) -> Tuple[int, int, int]:
        """(0-based scale, row, col) of a flat location index."""
        if not 0 <= index < self.num_locations:
            raise ShapeError(f"location {index} outside grid of {self.num_locations}")
        scale = int(np.searchsorted(self.offsets, index, side="right") - 1)
        local = index - int(self.offsets[scale])
        row, col = divmod(local, self.sizes[scale])
        return scale, row, col

    def box(self, index: int) -> Box:
        return Box(*(float(v) for v in self.boxes[index]))


@dataclass
class MatchAssignment:
    """
    Per-location matching result.

    Attributes:
        positive: x_f per location
        gt_index: matched ground truth per location, -1 where negative
        targets: encoded regression target per location (meaningful only where positive)
    """
    positive: np.ndarray
    gt_index: np.ndarray
    targets: np.ndarray

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.positive))

    @property
    def num_locations(self) -> int:
        return int(self.positive.shape[0])

    def encoded_target(self, index: int) -> Optional[Tuple[float, float, float, float]]:
        if not self.positive[index]:
            return None
        return tuple(float(v) for v in self.targets[index])


def empty_assignment(num_locations: int) -> MatchAssignment:
    return MatchAssignment(
        positive=np.zeros(num_locations, dtype=bool),
        gt_index=np.full(num_locations, -1, dtype=np.int64),
        targets=np.zeros((num_locations, 4)),
    )


def match(gts: Sequence[Box], grid: DefaultBoxGrid, iou_threshold: float) -> MatchAssignment:
    """
    Assign ground truths to default boxes.

    A location is positive when its best-overlapping GT reaches the threshold
    (the highest-IoU GT wins). Each GT additionally claims its single best
    still-unclaimed default box; GTs claim in order of decreasing best IoU and
    ties go to the lowest (scale, row, col) index.
    """
    if not 0 < iou_threshold < 1:
        raise ConfigError(f"IoU threshold must lie in (0, 1), got {iou_threshold}")
    assignment = empty_assignment(grid.num_locations)
    if len(gts) == 0:
        return assignment

    gt_boxes = np.asarray([tuple(g) for g in gts], dtype=np.float64).reshape(-1, 4)
    overlaps = iou_matrix(gt_boxes, grid.boxes)

    best_gt = overlaps.argmax(axis=0)
    best_iou = overlaps.max(axis=0)
    positive = best_iou >= iou_threshold
    gt_index = np.where(positive, best_gt, -1)

    claimed: List[int] = []
    claim_order = sorted(range(len(gt_boxes)), key=lambda g: (-overlaps[g].max(), g))
    for g in claim_order:
        row = overlaps[g].copy()
        row[claimed] = -1.0
        loc = int(np.argmax(row))
        claimed.append(loc)
        positive[loc] = True
        gt_index[loc] = g

    targets = np.zeros((grid.num_locations, 4))
    if positive.any():
        targets[positive] = encode_boxes(gt_boxes[gt_index[positive]], grid.boxes[positive])

    assignment.positive = positive
    assignment.gt_index = gt_index.astype(np.int64)
    assignment.targets = targets
    return assignment

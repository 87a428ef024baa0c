"""
Training-time augmentation.

Each sample is flipped with probability flip_prob and then goes through exactly
one mechanism drawn uniformly from the enabled set: shrink, crop, gamma or
Hide-and-Seek. Geometric mechanisms transform the ground-truth boxes with the
pixels. All operations work on raw [0, 1] pixels; ``normalize`` runs last.
"""
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .anchors import Box
from .data import IMAGE_SIZE, AnnotatedImage
from .errors import DomainError, ShapeError
from .models import AugmentConfig, DatasetStats, HasMode, Mechanism

DEFAULT_FILL = (0.5, 0.5, 0.5)


def _channel_vector(values: Sequence[float]) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(3, 1, 1)


def normalize(image: np.ndarray, stats: DatasetStats) -> np.ndarray:
    """Per channel (v - mean) / std."""
    return (np.asarray(image, dtype=np.float64) - _channel_vector(stats.mean)) / _channel_vector(stats.std)


def denormalize(image: np.ndarray, stats: DatasetStats) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) * _channel_vector(stats.std) + _channel_vector(stats.mean)


def fill_color(stats: Optional[DatasetStats]) -> Tuple[float, float, float]:
    return tuple(stats.mean) if stats is not None else DEFAULT_FILL


def _check_image(image: np.ndarray) -> None:
    if image.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"expected a [3, {IMAGE_SIZE}, {IMAGE_SIZE}] image, got {image.shape}")


def resize_image(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of a [3, H, W] image to [3, side, side]; unchanged sizes are returned as a copy."""
    if image.shape[1] == side and image.shape[2] == side:
        return image.copy()
    channels = []
    for channel in image:
        resized = Image.fromarray(channel.astype(np.float32)).resize(
            (side, side), resample=Image.Resampling.BILINEAR
        )
        channels.append(np.asarray(resized, dtype=np.float64))
    return np.clip(np.stack(channels), 0.0, 1.0)


# -- geometric mechanisms ---------------------------------------------------------------

def hflip(sample: AnnotatedImage) -> AnnotatedImage:
    """Mirror horizontally; cx -> 1 - cx, everything else unchanged."""
    faces = [f.with_box(Box(1.0 - f.box.cx, f.box.cy, f.box.w, f.box.h)) for f in sample.faces]
    return sample.with_(image=sample.image[:, :, ::-1].copy(), faces=faces)


def shrink(
    sample: AnnotatedImage,
    factor: float,
    offset: Tuple[int, int] = (0, 0),
    fill: Sequence[float] = DEFAULT_FILL
) -> AnnotatedImage:
    """
    Scale the image down by ``factor`` and paste it at pixel ``offset`` (x, y)
    on a canvas of the fill colour.
    """
    _check_image(sample.image)
    if not 0 < factor <= 1:
        raise DomainError(f"shrink factor must lie in (0, 1], got {factor}")
    side = max(1, int(round(IMAGE_SIZE * factor)))
    x0, y0 = offset
    if not (0 <= x0 <= IMAGE_SIZE - side and 0 <= y0 <= IMAGE_SIZE - side):
        raise DomainError(f"offset {offset} places a {side}px image outside the canvas")
    if side == IMAGE_SIZE:
        return sample.with_(image=sample.image.copy(), faces=list(sample.faces))

    canvas = np.broadcast_to(_channel_vector(fill), sample.image.shape).copy()
    canvas[:, y0:y0 + side, x0:x0 + side] = resize_image(sample.image, side)
    scale = side / IMAGE_SIZE
    ox, oy = x0 / IMAGE_SIZE, y0 / IMAGE_SIZE
    faces = [
        f.with_box(Box(ox + f.box.cx * scale, oy + f.box.cy * scale, f.box.w * scale, f.box.h * scale))
        for f in sample.faces
    ]
    return sample.with_(image=canvas, faces=faces)


def crop_box(box: Box, window: Tuple[int, int, int], min_visible: float = 0.5) -> Optional[Box]:
    """
    Map a box into a square crop window (x0, y0, side in pixels).

    Returns None when the box centre falls outside the window or less than
    ``min_visible`` of its area remains; partially visible boxes are clipped.
    """
    x0, y0, side = window
    wx, wy, ws = x0 / IMAGE_SIZE, y0 / IMAGE_SIZE, side / IMAGE_SIZE
    moved = Box((box.cx - wx) / ws, (box.cy - wy) / ws, box.w / ws, box.h / ws)
    if not (0.0 <= moved.cx <= 1.0 and 0.0 <= moved.cy <= 1.0):
        return None
    x1, y1, x2, y2 = moved.corners()
    if x1 >= 0.0 and y1 >= 0.0 and x2 <= 1.0 and y2 <= 1.0:
        return moved
    cx1, cy1, cx2, cy2 = max(x1, 0.0), max(y1, 0.0), min(x2, 1.0), min(y2, 1.0)
    visible = (cx2 - cx1) * (cy2 - cy1) / moved.area
    if visible < min_visible:
        return None
    return Box.from_corners(cx1, cy1, cx2, cy2)


def crop(sample: AnnotatedImage, window: Tuple[int, int, int], min_visible: float = 0.5) -> AnnotatedImage:
    """Cut the square window (x0, y0, side) and rescale it to the full image size."""
    _check_image(sample.image)
    x0, y0, side = (int(v) for v in window)
    if side < 1 or x0 < 0 or y0 < 0 or x0 + side > IMAGE_SIZE or y0 + side > IMAGE_SIZE:
        raise DomainError(f"crop window {window} lies outside the image")
    image = resize_image(sample.image[:, y0:y0 + side, x0:x0 + side], IMAGE_SIZE)
    faces = []
    for face in sample.faces:
        moved = crop_box(face.box, (x0, y0, side), min_visible)
        if moved is not None:
            faces.append(face.with_box(moved))
    return sample.with_(image=image, faces=faces)


# -- photometric mechanisms ---------------------------------------------------------------

def gamma_correct(image: np.ndarray, gammas: Sequence[float]) -> np.ndarray:
    """Per channel v -> v ** gamma."""
    gammas = np.asarray(gammas, dtype=np.float64)
    if gammas.shape != (3,) or np.any(gammas <= 0):
        raise DomainError(f"need three positive gammas, got {gammas.tolist()}")
    return np.power(np.clip(image, 0.0, 1.0), gammas.reshape(3, 1, 1))


def patch_bounds(size: int, divisions: int) -> np.ndarray:
    """Patch edges along one axis; the last patch absorbs the remainder."""
    if divisions < 1 or divisions > size:
        raise DomainError(f"cannot split {size} pixels into {divisions} patches")
    step = size // divisions
    edges = np.arange(divisions + 1) * step
    edges[-1] = size
    return edges


def hide_patches(image: np.ndarray, hidden: np.ndarray, fill: Sequence[float] = DEFAULT_FILL) -> np.ndarray:
    """Replace the patches flagged in the [D, D] mask ``hidden`` with the fill colour."""
    hidden = np.asarray(hidden, dtype=bool)
    d = hidden.shape[0]
    if hidden.shape != (d, d):
        raise ShapeError(f"hidden mask must be square, got {hidden.shape}")
    rows = patch_bounds(image.shape[1], d)
    cols = patch_bounds(image.shape[2], d)
    out = image.copy()
    color = _channel_vector(fill)
    for i, j in zip(*np.nonzero(hidden)):
        out[:, rows[i]:rows[i + 1], cols[j]:cols[j + 1]] = color
    return out


def draw_hidden_patches(divisions: Sequence[int], rng: np.random.Generator, hide_prob: float = 0.25) -> np.ndarray:
    """Pick D uniformly from ``divisions`` and flag each of the D x D patches with probability hide_prob."""
    d = int(divisions[int(rng.integers(len(divisions)))])
    return rng.random((d, d)) < hide_prob


def hide_and_seek(
    image: np.ndarray,
    mode: HasMode,
    rng: np.random.Generator,
    fill: Sequence[float] = DEFAULT_FILL,
    hide_prob: float = 0.25,
    cfg: Optional[AugmentConfig] = None
) -> np.ndarray:
    cfg = cfg or AugmentConfig()
    divisions = cfg.coarse_divisions if HasMode(mode) == HasMode.COARSE else cfg.fine_divisions
    return hide_patches(image, draw_hidden_patches(divisions, rng, hide_prob), fill)


# -- sample pipeline -----------------------------------------------------------------------

def choose_mechanism(cfg: AugmentConfig, rng: np.random.Generator) -> Mechanism:
    return cfg.mechanisms[int(rng.integers(len(cfg.mechanisms)))]


def _log_uniform(rng: np.random.Generator, lo: float, hi: float, size=None):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size=size))


def augment_sample(
    sample: AnnotatedImage,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    fill: Sequence[float] = DEFAULT_FILL
) -> AnnotatedImage:
    """Flip, then one mechanism; deterministic for a given generator state."""
    if rng.random() < cfg.flip_prob:
        sample = hflip(sample)

    mechanism = choose_mechanism(cfg, rng)
    if mechanism == Mechanism.SHRINK:
        factor = rng.uniform(*cfg.shrink_range)
        side = max(1, int(round(IMAGE_SIZE * factor)))
        x0, y0 = (int(v) for v in rng.integers(0, IMAGE_SIZE - side + 1, size=2))
        return shrink(sample, side / IMAGE_SIZE, (x0, y0), fill)

    if mechanism == Mechanism.CROP:
        side = max(1, int(round(IMAGE_SIZE * rng.uniform(*cfg.crop_range))))
        x0, y0 = (int(v) for v in rng.integers(0, IMAGE_SIZE - side + 1, size=2))
        return crop(sample, (x0, y0, side), cfg.crop_min_visible)

    if mechanism == Mechanism.GAMMA:
        gammas = _log_uniform(rng, *cfg.gamma_range, size=3)
        return sample.with_(image=gamma_correct(sample.image, gammas))

    if rng.random() < cfg.has_apply_prob:
        hidden = draw_hidden_patches(cfg.divisions, rng, cfg.has_hide_prob)
        return sample.with_(image=hide_patches(sample.image, hidden, fill))
    return sample

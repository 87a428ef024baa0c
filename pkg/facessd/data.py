"""
Procedural synthetic face dataset.

Faces are schematic (head ellipse, two eyes, a mouth curve) drawn with Pillow on
striped, noisy backgrounds. Every label is a function of the render parameters:
smile and valence come from the mouth curvature, arousal from eye and mouth
openness, and each attribute bit toggles one visible style element.
"""
import io
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from .anchors import Box, iou
from .errors import DatasetFormatError, DomainError, GenerationError
from .models import DatasetManifest, DatasetStats, FaceAnnotation, SyntheticSpec

logger = logging.getLogger("facessd.data")

IMAGE_SIZE = 300
MAX_ATTRIBUTES = 8

ANNOTATIONS_FILE = "annotations.txt"
MANIFEST_FILE = "manifest.json"
IMAGES_DIR = "images"

SPLITS = ("train", "val", "test")


@dataclass
class AnnotatedImage:
    """
    One image with its ground truth.

    Attributes:
        image: [3, 300, 300] pixels in [0, 1]
        faces: ground-truth faces with task labels
        image_id: stable identifier, also the file stem on disk
    """
    image: np.ndarray
    faces: List[FaceAnnotation] = field(default_factory=list)
    image_id: str = ""

    @property
    def boxes(self) -> List[Box]:
        return [face.box for face in self.faces]

    def with_(self, **changes) -> "AnnotatedImage":
        return replace(self, **changes)


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def image_id_for(index: int) -> str:
    return f"img{index:05d}"


# -- rendering ------------------------------------------------------------------------

class FaceStyle(NamedTuple):
    """Render parameters of one face; the labels are read straight off these."""
    curvature: float
    openness: float
    attributes: Tuple[int, ...]


def style_from_labels(face: FaceAnnotation) -> FaceStyle:
    return FaceStyle(curvature=face.valence, openness=face.arousal, attributes=tuple(face.attributes))


def labels_from_style(box: Box, style: FaceStyle) -> FaceAnnotation:
    """Mouth curving up (positive curvature) is a smile; valence is the curvature itself."""
    return FaceAnnotation(
        box=box,
        smile=1 if style.curvature > 0 else 0,
        attributes=style.attributes,
        valence=style.curvature,
        arousal=style.openness,
    )


SKIN = (224, 182, 150)
SKIN_DARK = (150, 105, 80)
HAIR_LIGHT = (200, 160, 60)
HAIR_DARK = (40, 30, 25)


def _px(v: float) -> float:
    return v * IMAGE_SIZE


def render_face(draw: ImageDraw.ImageDraw, box: Box, style: FaceStyle) -> None:
    """Draw one schematic face inside ``box`` (normalised, square)."""
    bits = tuple(style.attributes) + (0,) * (MAX_ATTRIBUTES - len(style.attributes))
    x1, y1, x2, y2 = (_px(v) for v in box.corners())
    side = x2 - x1

    def at(u: float, v: float) -> Tuple[float, float]:
        return x1 + u * side, y1 + v * side

    skin = SKIN_DARK if bits[6] else SKIN
    draw.ellipse([x1, y1, x2, y2], fill=skin, outline=(60, 40, 30))

    # hair shade over the top of the head
    hair = HAIR_DARK if bits[2] else HAIR_LIGHT
    draw.chord([x1, y1, x2, y2], start=200, end=340, fill=hair)

    if bits[1]:
        draw.rectangle([*at(0.1, 0.02), *at(0.9, 0.12)], fill=(180, 30, 30))

    eye_h = 0.03 + 0.05 * (style.openness + 1.0) / 2.0
    for u in (0.33, 0.67):
        cx, cy = at(u, 0.42)
        r = 0.06 * side
        draw.ellipse([cx - r, cy - eye_h * side, cx + r, cy + eye_h * side], fill=(255, 255, 255), outline=(0, 0, 0))
        draw.ellipse([cx - r / 3, cy - r / 3, cx + r / 3, cy + r / 3], fill=(20, 20, 20))
        if bits[0]:
            ring = 0.11 * side
            draw.ellipse([cx - ring, cy - ring, cx + ring, cy + ring], outline=(10, 10, 120), width=max(1, int(side * 0.02)))
        if bits[4]:
            draw.line([*at(u - 0.08, 0.3), *at(u + 0.08, 0.3)], fill=(30, 20, 10), width=max(1, int(side * 0.03)))
        if bits[5]:
            ex, ey = at(0.02 if u < 0.5 else 0.98, 0.55)
            draw.ellipse([ex - 0.025 * side, ey - 0.025 * side, ex + 0.025 * side, ey + 0.025 * side], fill=(230, 200, 40))

    if bits[7]:
        draw.ellipse([*at(0.46, 0.5), *at(0.54, 0.58)], fill=(200, 90, 90))

    if bits[3]:
        draw.chord([*at(0.15, 0.45), *at(0.85, 0.98)], start=20, end=160, fill=(70, 50, 35))

    # mouth: parabola whose centre dips for a smile and rises for a frown
    depth = 0.12 * style.curvature
    width = max(1, int(side * (0.02 + 0.04 * (style.openness + 1.0) / 2.0)))
    points = []
    for t in np.linspace(-1.0, 1.0, 17):
        points.append(at(0.5 + 0.22 * t, 0.72 + depth * (1.0 - t * t)))
    draw.line(points, fill=(120, 20, 30), width=width)


def _background(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    base = rng.uniform(0.3, 0.7, size=3)
    period = rng.uniform(20.0, 80.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    rows = np.arange(IMAGE_SIZE)
    stripes = spec.stripe_amplitude * np.sin(2.0 * math.pi * rows / period + phase)
    noise = rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, size=(IMAGE_SIZE, IMAGE_SIZE, 3))
    pixels = base[None, None, :] + stripes[:, None, None] + noise
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


def _place_faces(rng: np.random.Generator, spec: SyntheticSpec, count: int, index: int) -> List[Box]:
    boxes: List[Box] = []
    lo, hi = spec.face_size_range
    for _ in range(count):
        for _attempt in range(spec.max_retries):
            s = rng.uniform(lo, hi)
            cx = rng.uniform(s / 2.0, 1.0 - s / 2.0)
            cy = rng.uniform(s / 2.0, 1.0 - s / 2.0)
            candidate = Box(float(cx), float(cy), float(s), float(s))
            if all(iou(candidate, other) <= spec.max_overlap for other in boxes):
                boxes.append(candidate)
                break
        else:
            raise GenerationError(
                f"could not place face {len(boxes) + 1} of {count} in image {index} "
                f"after {spec.max_retries} attempts"
            )
    return boxes


def generate_image(spec: SyntheticSpec, index: int) -> AnnotatedImage:
    """Render image ``index`` of the dataset described by ``spec``; pure in (spec, index)."""
    rng = np.random.default_rng(derive_seed(spec.seed, index))
    canvas = Image.fromarray(_background(rng, spec))
    draw = ImageDraw.Draw(canvas)

    lo, hi = spec.faces_per_image
    count = int(rng.integers(lo, hi + 1))
    faces = []
    for box in _place_faces(rng, spec, count, index):
        style = FaceStyle(
            curvature=float(rng.uniform(-1.0, 1.0)),
            openness=float(rng.uniform(-1.0, 1.0)),
            attributes=tuple(int(b) for b in rng.integers(0, 2, size=spec.num_attributes)),
        )
        render_face(draw, box, style)
        faces.append(labels_from_style(box, style))

    pixels = np.asarray(canvas, dtype=np.float64).transpose(2, 0, 1) / 255.0
    return AnnotatedImage(image=pixels, faces=faces, image_id=image_id_for(index))


def generate(spec: SyntheticSpec) -> List[AnnotatedImage]:
    images = [generate_image(spec, i) for i in range(spec.num_images)]
    logger.info(
        f"GENERATED | images={len(images)} | faces={sum(len(a.faces) for a in images)} | seed={spec.seed}"
    )
    return images


def split_ids(spec: SyntheticSpec) -> Dict[str, str]:
    """Contiguous split membership: train first, then val, then test."""
    n = spec.num_images
    n_test = int(round(n * spec.test_fraction))
    n_val = int(round(n * spec.val_fraction))
    n_train = max(0, n - n_val - n_test)
    splits = {}
    for i in range(n):
        if i < n_train:
            splits[image_id_for(i)] = "train"
        elif i < n_train + n_val:
            splits[image_id_for(i)] = "val"
        else:
            splits[image_id_for(i)] = "test"
    return splits


def select_split(images: Sequence[AnnotatedImage], manifest: DatasetManifest, split: Optional[str]) -> List[AnnotatedImage]:
    """Images of one split; ``None`` or "all" keeps everything. Ids missing from the manifest count as train."""
    if split is None or split == "all":
        return list(images)
    if split not in SPLITS:
        raise DomainError(f"unknown split {split!r} (expected one of {', '.join(SPLITS)} or all)")
    return [a for a in images if manifest.splits.get(a.image_id, "train") == split]


# -- statistics ------------------------------------------------------------------------

def compute_stats(dataset: Iterable[AnnotatedImage]) -> DatasetStats:
    """
    Per-channel population mean and standard deviation of all pixels.

    Streams over images, merging per-image moments pairwise.

    Raises:
        DomainError: for an empty dataset or a channel with zero variance
    """
    count = 0
    mean = np.zeros(3)
    m2 = np.zeros(3)
    for sample in dataset:
        pixels = np.asarray(sample.image, dtype=np.float64).reshape(3, -1)
        n_b = pixels.shape[1]
        mean_b = pixels.mean(axis=1)
        m2_b = ((pixels - mean_b[:, None]) ** 2).sum(axis=1)
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta ** 2 * (count * n_b / total)
        count = total
    if count == 0:
        raise DomainError("cannot compute statistics of an empty dataset")
    std = np.sqrt(m2 / count)
    if np.any(std <= 0):
        raise DomainError(f"zero standard deviation in channel(s) {np.flatnonzero(std <= 0).tolist()}")
    return DatasetStats(mean=tuple(float(v) for v in mean), std=tuple(float(v) for v in std))


# -- file I/O ---------------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """[3, H, W] in [0, 1] to [H, W, 3] bytes."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(image: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PPM")
    return path


def _decode_ppm(source, label, expected_size: Optional[int]) -> np.ndarray:
    try:
        with Image.open(source) as img:
            if img.format != "PPM" or img.mode != "RGB":
                raise DatasetFormatError(f"expected an RGB PPM (P6), got {img.format} {img.mode}", path=label)
            img.load()
            pixels = np.asarray(img, dtype=np.float64)
    except DatasetFormatError:
        raise
    except (OSError, ValueError, SyntaxError) as e:
        raise DatasetFormatError(f"unreadable image: {e}", path=label) from None
    if expected_size is not None and pixels.shape[:2] != (expected_size, expected_size):
        raise DatasetFormatError(
            f"image is {pixels.shape[1]}x{pixels.shape[0]}, expected {expected_size}x{expected_size}", path=label
        )
    return pixels.transpose(2, 0, 1) / 255.0


def read_ppm(path: Union[str, Path], expected_size: Optional[int] = IMAGE_SIZE) -> np.ndarray:
    """Read a binary PPM into [3, H, W] floats in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise DatasetFormatError("image file not found", path=path)
    return _decode_ppm(path, path, expected_size)


def decode_ppm(data: bytes, expected_size: Optional[int] = IMAGE_SIZE, label: str = "<bytes>") -> np.ndarray:
    """Same as ``read_ppm`` for an in-memory file."""
    return _decode_ppm(io.BytesIO(data), label, expected_size)


def format_annotations(images: Sequence[AnnotatedImage]) -> str:
    lines = []
    for sample in images:
        lines.append(f"image {sample.image_id}")
        for face in sample.faces:
            bits = face.attribute_bits or "-"
            coords = " ".join(repr(float(v)) for v in face.box)
            lines.append(f"face {coords} {face.smile} {bits} {face.valence!r} {face.arousal!r}")
    return "\n".join(lines) + ("\n" if lines else "")


_TOKEN = re.compile(r"\S+")


def parse_annotations(text: str, path: Optional[Path] = None) -> List[Tuple[str, List[FaceAnnotation]]]:
    """
    Parse the annotation text format.

    Raises:
        DatasetFormatError: with 1-based line and column of the offending token
    """
    entries: List[Tuple[str, List[FaceAnnotation]]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = [(m.group(), m.start() + 1) for m in _TOKEN.finditer(line)]
        if not tokens or tokens[0][0].startswith("#"):
            continue
        keyword, _ = tokens[0]
        if keyword == "image":
            if len(tokens) != 2:
                raise DatasetFormatError("expected 'image <id>'", path, line_no, tokens[0][1])
            entries.append((tokens[1][0], []))
            continue
        if keyword != "face":
            raise DatasetFormatError(f"unknown record {keyword!r}", path, line_no, tokens[0][1])
        if not entries:
            raise DatasetFormatError("face record before any image record", path, line_no, tokens[0][1])
        if len(tokens) != 9:
            col = tokens[min(len(tokens), 9) - 1][1]
            raise DatasetFormatError(f"face record needs 8 fields, got {len(tokens) - 1}", path, line_no, col)

        values = []
        for i in (1, 2, 3, 4, 7, 8):
            token, col = tokens[i]
            try:
                values.append(float(token))
            except ValueError:
                raise DatasetFormatError(f"not a number: {token!r}", path, line_no, col) from None
        smile_token, smile_col = tokens[5]
        if smile_token not in ("0", "1"):
            raise DatasetFormatError(f"smile must be 0 or 1, got {smile_token!r}", path, line_no, smile_col)
        bits_token, bits_col = tokens[6]
        if bits_token != "-" and set(bits_token) - {"0", "1"}:
            raise DatasetFormatError(f"attribute bits must be 0/1 characters, got {bits_token!r}", path, line_no, bits_col)
        bits = () if bits_token == "-" else tuple(int(c) for c in bits_token)

        cx, cy, w, h, valence, arousal = values
        try:
            face = FaceAnnotation(
                box=Box(cx, cy, w, h), smile=int(smile_token), attributes=bits,
                valence=valence, arousal=arousal,
            )
        except ValueError as e:
            raise DatasetFormatError(f"invalid face: {e}", path, line_no, tokens[1][1]) from None
        entries[-1][1].append(face)
    return entries


def save_dataset(
    images: Sequence[AnnotatedImage],
    root: Union[str, Path],
    manifest: Optional[DatasetManifest] = None
) -> Path:
    """Write images/<id>.ppm, annotations.txt and manifest.json under ``root``."""
    root = Path(root)
    (root / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    for sample in images:
        write_ppm(sample.image, root / IMAGES_DIR / f"{sample.image_id}.ppm")
    (root / ANNOTATIONS_FILE).write_text(format_annotations(images), encoding="utf-8")

    if manifest is None:
        num_attributes = max((len(f.attributes) for a in images for f in a.faces), default=MAX_ATTRIBUTES)
        manifest = DatasetManifest(
            num_attributes=num_attributes,
            splits={a.image_id: "train" for a in images},
        )
    (root / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"SAVED | root={root} | images={len(images)}")
    return root


def load_dataset(root: Union[str, Path]) -> Tuple[List[AnnotatedImage], DatasetManifest]:
    root = Path(root)
    ann_path = root / ANNOTATIONS_FILE
    if not ann_path.is_file():
        raise DatasetFormatError("annotation file not found", path=ann_path)
    manifest_path = root / MANIFEST_FILE
    if not manifest_path.is_file():
        raise DatasetFormatError("manifest not found", path=manifest_path)
    try:
        manifest = DatasetManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise DatasetFormatError(f"invalid manifest: {e}", path=manifest_path) from None

    images = []
    for image_id, faces in parse_annotations(ann_path.read_text(encoding="utf-8"), ann_path):
        pixels = read_ppm(root / IMAGES_DIR / f"{image_id}.ppm")
        images.append(AnnotatedImage(image=pixels, faces=faces, image_id=image_id))
    logger.info(f"LOADED | root={root} | images={len(images)}")
    return images, manifest


def generate_dataset(spec: SyntheticSpec, root: Union[str, Path]) -> Tuple[List[AnnotatedImage], DatasetManifest]:
    """Generate and save, recording split membership in the manifest."""
    images = generate(spec)
    manifest = DatasetManifest(num_attributes=spec.num_attributes, splits=split_ids(spec), spec=spec)
    save_dataset(images, root, manifest)
    return images, manifest

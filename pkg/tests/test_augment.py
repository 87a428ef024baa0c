from collections import Counter

import numpy as np
import pytest

from facessd.anchors import Box, iou
from facessd.augment import (
    augment_sample, choose_mechanism, crop, crop_box, denormalize, draw_hidden_patches, gamma_correct, hflip,
    hide_and_seek, hide_patches, normalize, patch_bounds, shrink
)
from facessd.data import AnnotatedImage
from facessd.errors import DomainError, ShapeError
from facessd.models import AugmentConfig, DatasetStats, FaceAnnotation, HasMode, Mechanism


@pytest.fixture
def sample(tiny_dataset):
    return tiny_dataset[0]


def test_hflip_twice_is_identity(sample):
    twice = hflip(hflip(sample))
    np.testing.assert_array_equal(twice.image, sample.image)
    for a, b in zip(twice.boxes, sample.boxes):
        assert a == pytest.approx(b)


def test_hflip_mirrors_boxes(sample):
    flipped = hflip(sample)
    for a, b in zip(flipped.boxes, sample.boxes):
        assert a.cx == pytest.approx(1.0 - b.cx)
        assert (a.cy, a.w, a.h) == (b.cy, b.w, b.h)
    np.testing.assert_array_equal(flipped.image[:, :, 0], sample.image[:, :, -1])


def test_normalize_round_trip(sample):
    stats = DatasetStats(mean=(0.4, 0.5, 0.6), std=(0.2, 0.25, 0.3))
    normed = normalize(sample.image, stats)
    np.testing.assert_allclose(normed[1, 0, 0], (sample.image[1, 0, 0] - 0.5) / 0.25)
    np.testing.assert_allclose(denormalize(normed, stats), sample.image, atol=1e-12)


def test_shrink_maps_boxes_and_fills_border():
    image = np.full((3, 300, 300), 0.8)
    face = AnnotatedImage(image=image, faces=[FaceAnnotation(box=Box(0.5, 0.5, 0.4, 0.2))], image_id="x")
    out = shrink(face, 0.5, offset=(150, 0), fill=(0.1, 0.2, 0.3))
    assert out.boxes[0] == pytest.approx(Box(0.75, 0.25, 0.2, 0.1))
    np.testing.assert_allclose(out.image[:, 299, 0], [0.1, 0.2, 0.3])
    np.testing.assert_allclose(out.image[:, 10, 200], [0.8, 0.8, 0.8], atol=1e-6)


def test_shrink_validation(sample):
    unchanged = shrink(sample, 1.0)
    np.testing.assert_array_equal(unchanged.image, sample.image)
    with pytest.raises(DomainError):
        shrink(sample, 0.5, offset=(200, 0))
    with pytest.raises(DomainError):
        shrink(sample, 1.5)


def test_crop_box_rules():
    window = (0, 0, 150)
    assert crop_box(Box(0.25, 0.25, 0.1, 0.1), window) == pytest.approx(Box(0.5, 0.5, 0.2, 0.2))
    assert crop_box(Box(0.75, 0.75, 0.1, 0.1), window) is None
    # centre inside, 70% visible: clipped at the right edge
    clipped = crop_box(Box(0.48, 0.25, 0.1, 0.1), window)
    x1, _, x2, _ = clipped.corners()
    assert x2 == pytest.approx(1.0)
    assert x1 == pytest.approx(0.86)
    # centre inside, 55% visible
    assert crop_box(Box(0.49, 0.25, 0.2, 0.1), window, min_visible=0.8) is None


def test_full_window_crop_is_identity(sample):
    out = crop(sample, (0, 0, 300))
    np.testing.assert_allclose(out.image, sample.image)
    for a, b in zip(out.boxes, sample.boxes):
        assert a == pytest.approx(b)
    with pytest.raises(DomainError):
        crop(sample, (200, 0, 150))


def test_gamma_correct(sample):
    np.testing.assert_allclose(gamma_correct(sample.image, [1.0, 1.0, 1.0]), sample.image)
    squared = gamma_correct(sample.image, [2.0, 1.0, 1.0])
    np.testing.assert_allclose(squared[0], sample.image[0] ** 2)
    with pytest.raises(DomainError):
        gamma_correct(sample.image, [1.0, 0.0, 1.0])
    with pytest.raises(DomainError):
        gamma_correct(sample.image, [1.0, 1.0])


def test_patch_bounds():
    assert patch_bounds(300, 3).tolist() == [0, 100, 200, 300]
    edges = patch_bounds(300, 7)
    assert edges[1] == 42 and edges[-1] == 300
    with pytest.raises(DomainError):
        patch_bounds(10, 11)


def test_hide_patches_fills_flagged_cells():
    image = np.ones((3, 300, 300))
    hidden = np.zeros((3, 3), dtype=bool)
    hidden[1, 2] = True
    out = hide_patches(image, hidden, fill=(0.0, 0.5, 0.0))
    np.testing.assert_array_equal(out[:, 100:200, 200:300], np.broadcast_to([[[0.0]], [[0.5]], [[0.0]]], (3, 100, 100)))
    assert out[:, :100].min() == 1.0
    np.testing.assert_array_equal(hide_patches(image, np.ones((4, 4), bool), (0.2, 0.2, 0.2)), np.full_like(image, 0.2))
    with pytest.raises(ShapeError):
        hide_patches(image, np.zeros((2, 3), bool))


def test_hide_and_seek_fraction_matches_probability():
    rng = np.random.default_rng(0)
    masks = np.stack([draw_hidden_patches([16], rng, 0.25) for _ in range(40)])
    three_sigma = 3 * np.sqrt(0.25 * 0.75 / masks.size)
    assert masks.mean() == pytest.approx(0.25, abs=three_sigma)


def test_hide_and_seek_modes(sample):
    rng = np.random.default_rng(3)
    coarse = hide_and_seek(sample.image, HasMode.COARSE, rng, hide_prob=1.0)
    np.testing.assert_allclose(coarse, 0.5)
    fine = hide_and_seek(sample.image, "fine", rng, hide_prob=0.0)
    np.testing.assert_array_equal(fine, sample.image)


def test_mechanisms_drawn_uniformly():
    cfg = AugmentConfig()
    rng = np.random.default_rng(11)
    draws = 10_000
    counts = Counter(choose_mechanism(cfg, rng) for _ in range(draws))
    assert set(counts) == set(Mechanism)
    three_sigma = 3 * np.sqrt(0.25 * 0.75 / draws)
    for mechanism in Mechanism:
        assert counts[mechanism] / draws == pytest.approx(0.25, abs=three_sigma)


def test_augment_sample_is_deterministic_per_seed(sample):
    cfg = AugmentConfig()
    a = augment_sample(sample, cfg, np.random.default_rng(42))
    b = augment_sample(sample, cfg, np.random.default_rng(42))
    np.testing.assert_array_equal(a.image, b.image)
    assert a.boxes == b.boxes
    assert a.image.shape == (3, 300, 300)


def test_augmented_boxes_stay_inside_image(tiny_dataset):
    cfg = AugmentConfig(mechanisms=[Mechanism.SHRINK, Mechanism.CROP])
    rng = np.random.default_rng(8)
    for _ in range(20):
        for sample in tiny_dataset:
            out = augment_sample(sample, cfg, rng)
            for box in out.boxes:
                assert 0.0 <= box.cx <= 1.0 and 0.0 <= box.cy <= 1.0
                assert box.w > 0 and box.h > 0


def test_gamma_only_keeps_boxes(sample):
    cfg = AugmentConfig(flip_prob=0.0, mechanisms=[Mechanism.GAMMA])
    out = augment_sample(sample, cfg, np.random.default_rng(1))
    assert out.boxes == sample.boxes
    assert np.all((out.image >= 0) & (out.image <= 1))


def marker_sample(rng):
    """Black image with one white rectangle exactly covering its face box."""
    side = rng.integers(90, 136, size=2)
    x1, y1 = (int(rng.integers(60, 300 - 60 - s)) for s in side)
    x2, y2 = x1 + int(side[0]), y1 + int(side[1])
    image = np.zeros((3, 300, 300))
    image[:, y1:y2, x1:x2] = 1.0
    box = Box.from_corners(x1 / 300, y1 / 300, x2 / 300, y2 / 300)
    return AnnotatedImage(image=image, faces=[FaceAnnotation(box=box)], image_id="marker")


def marker_box(image):
    ys, xs = np.nonzero(image[0] > 0.5)
    return Box.from_corners(xs.min() / 300, ys.min() / 300, (xs.max() + 1) / 300, (ys.max() + 1) / 300)


@pytest.mark.parametrize("seed", range(5))
def test_geometric_augmentation_moves_boxes_with_pixels(seed):
    rng = np.random.default_rng(seed)
    cfg = AugmentConfig(mechanisms=[Mechanism.SHRINK, Mechanism.CROP])
    checked = 0
    for _ in range(12):
        out = augment_sample(marker_sample(rng), cfg, rng, fill=(0.0, 0.0, 0.0))
        if not out.faces:
            continue
        assert iou(marker_box(out.image), out.boxes[0]) >= 0.9
        checked += 1
    assert checked > 0

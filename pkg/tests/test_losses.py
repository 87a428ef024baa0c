import math

import numpy as np
import pytest

from facessd.anchors import Box, MatchAssignment
from facessd.errors import ConfigError, DomainError, ShapeError
from facessd.losses import (
    analysis_loss, attribute_loss, batch_task_loss, bce, bce_elements, face_loss, face_loss_terms, multitask_total,
    recycle_hard_samples, select_hard_negatives, smile_loss, smooth_l1, smooth_l1_sum, task_labels, va_loss
)
from facessd.models import FaceAnnotation, FaceLossConfig, HeadConfig, TaskName, TaskWeights
from facessd.tensor import Tensor, backward

from .conftest import check_gradients


def assignment(positive, gt_index=None, targets=None):
    positive = np.asarray(positive, dtype=bool)
    if gt_index is None:
        gt_index = np.where(positive, 0, -1)
    if targets is None:
        targets = np.zeros((positive.size, 4))
    return MatchAssignment(positive=positive, gt_index=np.asarray(gt_index), targets=np.asarray(targets, dtype=float))


def face(**labels):
    return FaceAnnotation(box=Box(0.5, 0.5, 0.2, 0.2), **labels)


@pytest.mark.parametrize("k, expected", [(0.0, 0.0), (0.5, 0.125), (-0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_smooth_l1_values(k, expected):
    assert smooth_l1(k) == pytest.approx(expected)


def test_bce_values():
    assert bce(1, 0.5) == pytest.approx(math.log(2))
    assert bce(0, 0.5) == pytest.approx(math.log(2))
    assert math.isfinite(bce(1, 0.0))
    assert bce(1, 0.0) == pytest.approx(-math.log(1e-7))


def test_vector_forms_match_scalar_forms(rng):
    d = rng.normal(scale=2.0, size=(4, 6))
    assert smooth_l1_sum(Tensor(d)).item() == pytest.approx(sum(smooth_l1(k) for k in d.ravel()))
    c = rng.uniform(0.01, 0.99, size=8)
    x = rng.integers(0, 2, size=8)
    np.testing.assert_allclose(bce_elements(Tensor(c), x).data, [bce(xi, ci) for xi, ci in zip(x, c)])


@pytest.mark.parametrize("seed", range(20))
def test_loss_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(scale=2.0, size=(3, 4))
    d[np.abs(np.abs(d) - 1.0) < 0.05] += 0.2
    check_gradients(lambda t: smooth_l1_sum(t), [d])
    labels = rng.integers(0, 2, size=6)
    check_gradients(lambda t: bce_elements(t, labels).sum(), [rng.uniform(0.05, 0.95, size=6)])


def test_bce_gradient_vanishes_when_clamped():
    c = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    backward(bce_elements(c, [1.0, 0.0]).sum())
    np.testing.assert_array_equal(c.grad, [0.0, 0.0])


def test_select_hard_negatives():
    losses = [0.1, 0.9, 0.5, 0.9]
    assert select_hard_negatives(losses, 1, 3.0).tolist() == [1, 3, 2]
    assert select_hard_negatives(losses, 1, 1.0).tolist() == [1]
    assert select_hard_negatives(losses, 5, 3.0).tolist() == [1, 3, 2, 0]
    assert select_hard_negatives(losses, 0, 3.0).size == 0
    with pytest.raises(ConfigError):
        select_hard_negatives(losses, 1, 0.0)


@pytest.mark.parametrize("batch, expected", [(16, 5), (10, 3), (1, 1), (3, 1)])
def test_recycle_count(batch, expected):
    losses = np.linspace(0.0, 1.0, batch)
    chosen = recycle_hard_samples(losses, 0.3)
    assert len(chosen) == expected
    assert chosen == list(range(batch - 1, batch - 1 - expected, -1))


def test_recycle_ties_keep_order_and_validate():
    assert recycle_hard_samples([1.0, 2.0, 2.0, 0.5], 0.5) == [1, 2]
    assert recycle_hard_samples([], 0.3) == []
    with pytest.raises(ConfigError):
        recycle_hard_samples([1.0], 1.0)


def test_face_loss_by_hand():
    match = assignment([True, False, False, False])
    faces = Tensor(np.array([0.5, 0.2, 0.1, 0.4]))
    offsets = Tensor(np.zeros((4, 4)))
    expected_cls = math.log(2) - math.log(0.8) - math.log(0.9) - math.log(0.6)

    terms = face_loss_terms(match, faces, offsets)
    assert terms.total.item() == pytest.approx(expected_cls)
    assert terms.num_positive == 1 and terms.num_negative == 3

    mined = face_loss_terms(match, faces, offsets, FaceLossConfig(neg_pos_ratio=1.0))
    assert mined.total.item() == pytest.approx(math.log(2) - math.log(0.6))
    assert mined.num_negative == 1


def test_face_loss_regression_term():
    match = assignment([False, True])
    faces = Tensor(np.array([0.0, 1.0]))
    offsets = np.zeros((4, 2))
    offsets[:, 1] = [0.5, 0.0, 0.0, 2.0]
    terms = face_loss_terms(match, faces, Tensor(offsets), FaceLossConfig(lambda_=2.0))
    assert terms.reg == pytest.approx(1.625)
    assert terms.total.item() == pytest.approx(terms.cls + 2.0 * 1.625)


def test_face_loss_divides_by_positives():
    faces = Tensor(np.array([0.5, 0.5, 0.01, 0.01]))
    offsets = Tensor(np.zeros((4, 4)))
    one = face_loss_terms(assignment([True, False, False, False]), faces, offsets, FaceLossConfig(neg_pos_ratio=1.0))
    two = face_loss_terms(assignment([True, True, False, False]), faces, offsets, FaceLossConfig(neg_pos_ratio=1.0))
    assert two.cls == pytest.approx((2 * math.log(2) - 2 * math.log(0.99)) / 2)
    # the lone mined negative is the 0.5 location
    assert one.cls == pytest.approx(2 * math.log(2))


def test_face_loss_without_positives_is_zero():
    terms = face_loss_terms(assignment([False] * 3), Tensor(np.full(3, 0.9)), Tensor(np.ones((4, 3))))
    assert terms.total.item() == 0.0
    assert terms.num_positive == 0


def test_face_loss_shape_checks():
    with pytest.raises(ShapeError):
        face_loss(assignment([True, False]), Tensor(np.full(3, 0.5)), Tensor(np.zeros((4, 3))))


@pytest.mark.parametrize("seed", range(20))
def test_face_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    match = assignment([True, False, False, True, False], targets=rng.normal(scale=0.3, size=(5, 4)))
    # well separated confidences keep the mined negative set fixed under perturbation
    faces = rng.permutation([0.6, 0.15, 0.4, 0.7, 0.05])
    offsets = rng.normal(scale=0.4, size=(4, 5))
    check_gradients(lambda f, o: face_loss(match, f, o, FaceLossConfig(neg_pos_ratio=1.0)), [faces, offsets])


@pytest.mark.parametrize("seed", range(20))
def test_analysis_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    head = HeadConfig(tasks=(TaskName.SMILE, TaskName.ATTRIBUTES, TaskName.VA), num_attributes=2)
    faces = [face(smile=int(rng.integers(2)), attributes=tuple(int(b) for b in rng.integers(0, 2, 2)),
                  valence=float(rng.uniform(-1, 1)), arousal=float(rng.uniform(-1, 1))) for _ in range(2)]
    match = assignment([True, False, True, True], gt_index=[0, -1, 1, 0])
    maps = rng.uniform(0.1, 0.9, size=(5, 4))
    weights = TaskWeights(w=[1.0, 0.5, 2.0])
    check_gradients(lambda m: analysis_loss(match, faces, m, head, weights).total, [maps])


def test_smile_and_attribute_losses():
    assert smile_loss([1, 0], np.array([0.5, 0.5])).item() == pytest.approx(math.log(2))
    G = np.array([[1, 0], [0, 0], [1, 1]])
    P = np.array([[0.9, 0.2], [0.1, 0.3], [0.8, 0.6]])
    expected = np.mean([bce(g, p) for g, p in zip(G.ravel(), P.ravel())])
    assert attribute_loss(G, P).item() == pytest.approx(expected)
    with pytest.raises(ShapeError):
        attribute_loss(G, P[:2])


def test_va_loss():
    pred = np.array([[0.5, 0.0], [0.0, -0.2]])
    gt = np.zeros((2, 2))
    assert va_loss(pred, gt).item() == pytest.approx((0.25 / 4) + (0.04 / 4))
    flat = va_loss(np.array([0.5, 0.0, 0.0, -0.2]), np.zeros(4))
    assert flat.item() == pytest.approx(va_loss(pred, gt).item())
    with pytest.raises(ShapeError):
        va_loss(np.zeros(3), np.zeros(3))


def test_multitask_total():
    assert multitask_total([3.0, 4.0]).item() == pytest.approx(5.0)
    assert multitask_total([3.0, 4.0], TaskWeights(w=[2.0, 0.5])).item() == pytest.approx(math.sqrt(36 + 4))
    assert multitask_total([0.7]).item() == pytest.approx(0.7)
    with pytest.raises(DomainError):
        multitask_total([-1.0])
    with pytest.raises(ShapeError):
        multitask_total([1.0, 2.0], TaskWeights(w=[1.0]))
    with pytest.raises(ShapeError):
        multitask_total([])


def test_task_labels_layout():
    head = HeadConfig(tasks=(TaskName.SMILE, TaskName.ATTRIBUTES, TaskName.VA), num_attributes=2)
    faces = [face(smile=1, attributes=(0, 1), valence=0.5, arousal=-0.5), face(smile=0, attributes=(1, 1))]
    labels = task_labels(head, faces, np.array([1, 0]))
    np.testing.assert_allclose(labels, [
        [0, 1],
        [1, 0],
        [1, 1],
        [0.0, 0.5],
        [0.0, -0.5],
    ])


def test_analysis_loss_smile():
    head = HeadConfig.for_task(TaskName.SMILE)
    match = assignment([False, True, False], gt_index=[-1, 0, -1])
    maps = Tensor(np.array([[0.9, 0.5, 0.1]]))
    terms = analysis_loss(match, [face(smile=1)], maps, head)
    assert terms.total.item() == pytest.approx(math.log(2))
    assert terms.per_task == {"smile": pytest.approx(math.log(2))}
    assert terms.num_positive == 1


def test_analysis_loss_combines_tasks():
    head = HeadConfig(tasks=(TaskName.SMILE, TaskName.VA))
    match = assignment([True, False], gt_index=[0, -1])
    maps = Tensor(np.array([[0.5, 0.2], [0.5, 0.0], [0.0, 0.0]]))
    terms = analysis_loss(match, [face(smile=0, valence=0.0, arousal=0.0)], maps, head)
    smile, va = math.log(2), 0.25 / 2
    assert terms.per_task["va"] == pytest.approx(va)
    assert terms.total.item() == pytest.approx(math.sqrt(smile ** 2 + va ** 2))


def test_analysis_loss_without_matches_and_bad_shapes():
    head = HeadConfig.for_task(TaskName.SMILE)
    assert analysis_loss(assignment([False, False]), [], Tensor(np.zeros((1, 2))), head).total.item() == 0.0
    with pytest.raises(ShapeError):
        analysis_loss(assignment([True, False]), [face()], Tensor(np.zeros((2, 2))), head)


def test_batch_task_loss_takes_the_norm_of_batch_means():
    # per-sample norms are both 5; the norm of the task means is 3.5 * sqrt(2)
    per_sample = [[Tensor(3.0), Tensor(4.0)], [Tensor(4.0), Tensor(3.0)]]
    total = batch_task_loss(per_sample, batch_size=2)
    assert total.item() == pytest.approx(3.5 * math.sqrt(2))
    per_sample_mean = np.mean([multitask_total(losses).item() for losses in per_sample])
    assert per_sample_mean == pytest.approx(5.0)
    assert total.item() < per_sample_mean

    weighted = batch_task_loss(per_sample, batch_size=2, weights=TaskWeights(w=[2.0, 1.0]))
    assert weighted.item() == pytest.approx(math.sqrt(7.0 ** 2 + 3.5 ** 2))


def test_batch_task_loss_counts_unmatched_samples_as_zero():
    assert batch_task_loss([[Tensor(0.6)], []], batch_size=2).item() == pytest.approx(0.3)
    assert batch_task_loss([[], []], batch_size=2).item() == 0.0
    with pytest.raises(ShapeError):
        batch_task_loss([[Tensor(1.0)], [Tensor(1.0), Tensor(2.0)]], batch_size=2)
    with pytest.raises(ShapeError):
        batch_task_loss([[Tensor(1.0)]] * 3, batch_size=2)


@pytest.mark.parametrize("seed", range(20))
def test_batch_task_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    head = HeadConfig(tasks=(TaskName.SMILE, TaskName.VA))
    faces = [face(smile=int(rng.integers(2)), valence=float(rng.uniform(-1, 1)), arousal=float(rng.uniform(-1, 1)))
             for _ in range(2)]
    matches = [assignment([True, False, True], gt_index=[0, -1, 1]), assignment([False, True, False], gt_index=[-1, 1, -1])]
    maps = [rng.uniform(0.1, 0.9, size=(3, 3)) for _ in matches]

    def build(a, b):
        per_sample = [analysis_loss(m, faces, t, head).task_losses for m, t in zip(matches, (a, b))]
        return batch_task_loss(per_sample, batch_size=2)

    check_gradients(build, maps)


def test_batch_task_loss_differs_from_mean_of_sample_norms():
    head = HeadConfig(tasks=(TaskName.SMILE, TaskName.VA))
    match = assignment([True], gt_index=[0])
    smiling = analysis_loss(match, [face(smile=1, valence=0.0, arousal=0.0)], Tensor(np.array([[0.9], [0.0], [0.0]])), head)
    neutral = analysis_loss(match, [face(smile=0, valence=0.8, arousal=0.8)], Tensor(np.array([[0.1], [0.0], [0.0]])), head)
    smile = (smiling.per_task["smile"] + neutral.per_task["smile"]) / 2
    va = (smiling.per_task["va"] + neutral.per_task["va"]) / 2
    total = batch_task_loss([smiling.task_losses, neutral.task_losses], batch_size=2)
    assert total.item() == pytest.approx(math.sqrt(smile ** 2 + va ** 2))
    assert total.item() != pytest.approx((smiling.total.item() + neutral.total.item()) / 2)

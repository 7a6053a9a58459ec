import numpy as np
import pytest

from vqseg.errors import DataError
from vqseg.metrics import ConfusionMatrix, accumulate_confusion, iou_report, pixel_accuracy


def nested_loop_iou(pred, gt, C, ignore_index=255):
    counts = [[0] * C for _ in range(C)]
    for p, g in zip(pred.reshape(-1).tolist(), gt.reshape(-1).tolist()):
        if g == ignore_index:
            continue
        counts[g][p] += 1
    ious = []
    for c in range(C):
        tp = counts[c][c]
        fn = sum(counts[c]) - tp
        fp = sum(counts[r][c] for r in range(C)) - tp
        ious.append(None if tp + fn + fp == 0 else tp / (tp + fn + fp))
    defined = [v for v in ious if v is not None]
    return ious, sum(defined) / len(defined)


def test_perfect_prediction(rng):
    gt = rng.integers(0, 4, size=(6, 6))
    gt[0, :4] = np.arange(4)
    cm = accumulate_confusion(gt, gt, 255, ConfusionMatrix(4))
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    per_class, miou = iou_report(cm)
    assert miou == 1.0
    assert pixel_accuracy(cm) == 1.0
    assert all(entry.iou == 1.0 for entry in per_class)


def test_ignored_pixels_are_not_counted():
    gt = np.array([[0, 255], [1, 255]])
    pred = np.array([[0, 1], [1, 0]])
    cm = accumulate_confusion(pred, gt, 255, ConfusionMatrix(2))
    assert cm.total == 2


def test_hand_computed_matrix():
    cm = ConfusionMatrix(2)
    cm.counts[...] = [[2, 1], [1, 2]]
    per_class, miou = iou_report(cm, ["a", "b"])
    assert [entry.iou for entry in per_class] == [0.5, 0.5]
    assert [entry.name for entry in per_class] == ["a", "b"]
    assert miou == 0.5
    assert pixel_accuracy(cm) == pytest.approx(4 / 6)


def test_absent_class_is_excluded_from_mean():
    cm = accumulate_confusion(np.array([0, 0, 1]), np.array([0, 1, 1]), 255, ConfusionMatrix(3))
    per_class, miou = iou_report(cm)
    assert per_class[2].iou is None
    assert miou == pytest.approx((0.5 + 0.5) / 2)


def test_empty_matrix_is_an_error():
    with pytest.raises(DataError):
        iou_report(ConfusionMatrix(3))
    cm = accumulate_confusion(np.array([1]), np.array([255]), 255, ConfusionMatrix(3))
    with pytest.raises(DataError):
        iou_report(cm)


def test_matches_nested_loop_oracle(rng):
    for _ in range(50):
        C = int(rng.integers(2, 6))
        shape = tuple(int(s) for s in rng.integers(1, 7, size=2))
        gt = rng.integers(0, C, size=shape)
        gt[rng.random(shape) < 0.1] = 255
        gt.reshape(-1)[0] = 0
        pred = rng.integers(0, C, size=shape)
        per_class, miou = iou_report(accumulate_confusion(pred, gt, 255, ConfusionMatrix(C)))
        expected, expected_miou = nested_loop_iou(pred, gt, C)
        for entry, value in zip(per_class, expected):
            if value is None:
                assert entry.iou is None
            else:
                assert abs(entry.iou - value) < 1e-12
        assert abs(miou - expected_miou) < 1e-12


def test_invariant_under_pixel_permutation(rng):
    gt = rng.integers(0, 3, size=40)
    pred = rng.integers(0, 3, size=40)
    perm = rng.permutation(40)
    a = accumulate_confusion(pred, gt, 255, ConfusionMatrix(3))
    b = accumulate_confusion(pred[perm], gt[perm], 255, ConfusionMatrix(3))
    np.testing.assert_array_equal(a.counts, b.counts)


def test_additive_over_disjoint_pixels(rng):
    gt = rng.integers(0, 4, size=(2, 5, 5))
    pred = rng.integers(0, 4, size=(2, 5, 5))
    whole = accumulate_confusion(pred, gt, 255, ConfusionMatrix(4))
    first = accumulate_confusion(pred[0], gt[0], 255, ConfusionMatrix(4))
    second = accumulate_confusion(pred[1], gt[1], 255, ConfusionMatrix(4))
    np.testing.assert_array_equal((first + second).counts, whole.counts)
    np.testing.assert_array_equal(first.copy().merge(second).counts, whole.counts)
    with pytest.raises(DataError):
        first.merge(ConfusionMatrix(5))


def test_out_of_range_label_names_coordinates():
    gt = np.zeros((3, 3), dtype=np.int64)
    gt[2, 1] = 9
    with pytest.raises(DataError, match=r"\(2, 1\)"):
        accumulate_confusion(np.zeros((3, 3), dtype=np.int64), gt, 255, ConfusionMatrix(3))


def test_shape_mismatch():
    with pytest.raises(DataError):
        accumulate_confusion(np.zeros((2, 2)), np.zeros((2, 3)), 255, ConfusionMatrix(2))

import math

import numpy as np
import pytest

from geometry_metrics import (METRIC_COLUMNS, accuracy, centroid_distance, dice, evaluate_box, iou,
                              reports_frame, wall_distance)
from volume_store import BoundingBox


def _mask(box, dims):
    m = np.zeros(dims, dtype=bool)
    (lx, ly, lz), (ux, uy, uz) = box.lower, box.upper
    m[lx:ux, ly:uy, lz:uz] = True
    return m


def _random_box(rng, dims):
    lower = [int(rng.integers(0, d - 1)) for d in dims]
    size = [int(rng.integers(1, d - l + 1)) for l, d in zip(lower, dims)]
    return BoundingBox(tuple(lower), tuple(size))


def test_iou_and_dice_examples():
    a = BoundingBox((0, 0, 0), (4, 4, 4))
    b = BoundingBox((2, 0, 0), (4, 4, 4))
    assert iou(a, a) == 1.0 and dice(a, a) == 1.0
    assert iou(a, b) == pytest.approx(1 / 3, abs=1e-15)
    assert dice(a, b) == 0.5
    assert iou(a, BoundingBox((4, 0, 0), (2, 2, 2))) == 0.0
    assert dice(a, BoundingBox((10, 10, 10), (2, 2, 2))) == 0.0


def test_metrics_match_voxel_counting():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        dims = tuple(int(d) for d in rng.integers(2, 13, size=3))
        a, b = _random_box(rng, dims), _random_box(rng, dims)
        ma, mb = _mask(a, dims), _mask(b, dims)
        inter = int((ma & mb).sum())
        union = int((ma | mb).sum())
        assert iou(a, b) == inter / union
        assert dice(a, b) == 2 * inter / (int(ma.sum()) + int(mb.sum()))
        assert abs(dice(a, b) - 2 * iou(a, b) / (1 + iou(a, b))) < 1e-12
        assert iou(a, b) == iou(b, a)


def test_translation_invariance():
    rng = np.random.default_rng(1)
    spacing = (0.8, 1.0, 3.0)
    for _ in range(100):
        a, b = _random_box(rng, (20, 20, 20)), _random_box(rng, (20, 20, 20))
        shift = tuple(int(v) for v in rng.integers(-10, 10, size=3))
        a2, b2 = a.translated(shift), b.translated(shift)
        assert iou(a, b) == iou(a2, b2)
        assert dice(a, b) == dice(a2, b2)
        assert centroid_distance(a, b, spacing) == pytest.approx(centroid_distance(a2, b2, spacing))
        assert wall_distance(a, b, spacing) == pytest.approx(wall_distance(a2, b2, spacing))


def test_centroid_distance():
    a = BoundingBox((0, 0, 0), (2, 2, 2))
    b = BoundingBox((3, 4, 0), (2, 2, 2))
    assert centroid_distance(a, a, (1, 1, 1)) == 0.0
    assert centroid_distance(a, b, (1, 1, 1)) == pytest.approx(5.0)
    assert centroid_distance(a, b, (2, 1, 1)) == pytest.approx(math.sqrt(52))


def test_wall_distance():
    a = BoundingBox((0, 0, 0), (4, 4, 4))
    assert wall_distance(a, a, (1, 1, 1)) == 0.0
    assert wall_distance(a, BoundingBox((1, 1, 1), (4, 4, 4)), (1, 1, 1)) == pytest.approx(1.0)
    assert wall_distance(a, BoundingBox((0, 0, 0), (10, 4, 4)), (1, 1, 1)) == pytest.approx(1.0)
    assert wall_distance(a, BoundingBox((0, 0, 0), (4, 4, 6)), (1, 1, 3)) == pytest.approx(1.0)


def test_evaluate_box_detection_boundary_is_inclusive():
    truth = BoundingBox((0, 0, 0), (4, 4, 4))
    report = evaluate_box("s", BoundingBox((2, 0, 0), (4, 4, 4)), truth, (1, 1, 1))
    assert report.dice == 0.5 and report.detected
    assert not evaluate_box("s", BoundingBox((3, 0, 0), (4, 4, 4)), truth, (1, 1, 1)).detected
    perfect = evaluate_box("s", truth, truth, (1, 1, 1))
    assert perfect.iou == 1.0 and perfect.centroid_mm == 0.0 and perfect.wall_mm == 0.0


def test_accuracy_and_report_frame():
    truth = BoundingBox((0, 0, 0), (4, 4, 4))
    reports = [
        evaluate_box("a", truth, truth, (1, 1, 1)),
        evaluate_box("b", BoundingBox((10, 10, 10), (4, 4, 4)), truth, (1, 1, 1)),
    ]
    assert accuracy(reports) == 0.5
    assert accuracy([]) == 0.0
    frame = reports_frame(reports)
    assert list(frame.columns) == METRIC_COLUMNS
    assert frame["detected"].tolist() == [True, False]

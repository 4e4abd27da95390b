"""
Box algebra and the four localisation metrics: IOU, Dice, centroid distance
and average wall distance. Boxes are half-open voxel sets, so every count is
an exact integer product.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Sequence

import pandas as pd

from volume_store import BoundingBox

DETECTION_DICE = 0.5

METRIC_COLUMNS = ["scan_id", "iou", "dice", "centroid_mm", "wall_mm", "detected"]


@dataclass(frozen=True)
class MetricReport:
    scan_id: str
    iou: float
    dice: float
    centroid_mm: float
    wall_mm: float
    detected: bool

    def to_row(self) -> dict:
        return asdict(self)


def intersection_count(a: BoundingBox, b: BoundingBox) -> int:
    count = 1
    for la, ua, lb, ub in zip(a.lower, a.upper, b.lower, b.upper):
        overlap = min(ua, ub) - max(la, lb)
        if overlap <= 0:
            return 0
        count *= overlap
    return count


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = intersection_count(a, b)
    union = a.voxel_count + b.voxel_count - inter
    return inter / union


def dice(a: BoundingBox, b: BoundingBox) -> float:
    return 2 * intersection_count(a, b) / (a.voxel_count + b.voxel_count)


def centroid_distance(a: BoundingBox, b: BoundingBox, spacing: Sequence[float]) -> float:
    return math.sqrt(sum(((ca - cb) * s) ** 2 for ca, cb, s in zip(a.centre, b.centre, spacing)))


def wall_distance(a: BoundingBox, b: BoundingBox, spacing: Sequence[float]) -> float:
    """Mean absolute gap over the 6 corresponding faces, in mm."""
    gaps = []
    for axis, s in enumerate(spacing):
        gaps.append(abs(a.lower[axis] - b.lower[axis]) * s)
        gaps.append(abs(a.upper[axis] - b.upper[axis]) * s)
    return sum(gaps) / 6.0


def evaluate_box(scan_id: str, predicted: BoundingBox, truth: BoundingBox,
                 spacing: Sequence[float]) -> MetricReport:
    d = dice(predicted, truth)
    return MetricReport(
        scan_id=scan_id,
        iou=iou(predicted, truth),
        dice=d,
        centroid_mm=centroid_distance(predicted, truth, spacing),
        wall_mm=wall_distance(predicted, truth, spacing),
        detected=d >= DETECTION_DICE,
    )


def reports_frame(reports: List[MetricReport]) -> pd.DataFrame:
    """One CSV row per report, in the documented column order."""
    return pd.DataFrame([r.to_row() for r in reports], columns=METRIC_COLUMNS)


def accuracy(reports: List[MetricReport]) -> float:
    """Fraction of scans detected (Dice >= 50%)."""
    if not reports:
        return 0.0
    return sum(r.detected for r in reports) / len(reports)

"""
Bounding-box fusion: pick the architectures whose two candidates are confident
enough, take the union box over them, then pull each wall towards the centre
by an offset percentage of the spread of the corresponding bounds.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from geometry_metrics import iou
from inference import Candidate
from volume_store import BoundingBox

SWEEP_COLUMNS = ["offset_percent", "mean_iou", "n_scans"]


class FusionError(ValueError):
    """Raised on an empty candidate list or an invalid fusion configuration."""


@dataclass(frozen=True)
class FusionConfig:
    offset_percent: float = 33.0
    fuse_threshold: float = 0.66

    def validate(self):
        if not 0.0 <= self.offset_percent < 50.0:
            raise FusionError(f"❌ offset_percent must lie in [0, 50), got {self.offset_percent}")
        if self.fuse_threshold < 0:
            raise FusionError(f"❌ fuse_threshold must be >= 0, got {self.fuse_threshold}")


def confidence_sums(candidates: Sequence[Candidate]) -> Dict[int, float]:
    sums: Dict[int, float] = defaultdict(float)
    for c in candidates:
        sums[c.arch_id] += c.confidence
    return dict(sums)


def strongest_architecture(candidates: Sequence[Candidate]) -> Tuple[int, float]:
    """Architecture with the highest confidence sum; the lowest arch id wins ties."""
    sums = confidence_sums(candidates)
    arch_id = min(sums, key=lambda a: (-sums[a], a))
    return arch_id, sums[arch_id]


def select_candidates(candidates: Sequence[Candidate], config: FusionConfig) -> List[Candidate]:
    """Both boxes of the strongest architecture, plus those of every architecture
    whose confidence sum reaches fuse_threshold."""
    if not candidates:
        raise FusionError("❌ empty candidate list")
    sums = confidence_sums(candidates)
    best, _ = strongest_architecture(candidates)
    chosen = {a for a, s in sums.items() if a == best or s >= config.fuse_threshold}
    return [c for c in candidates if c.arch_id in chosen]


def _round_lower(x: float) -> int:
    # nearest integer, ties away from the centre (down)
    return int(math.ceil(x - 0.5))


def _round_upper(x: float) -> int:
    # nearest integer, ties away from the centre (up)
    return int(math.floor(x + 0.5))


def fuse(candidates: Sequence[Candidate], config: FusionConfig = FusionConfig(),
         dims: Optional[Sequence[int]] = None) -> BoundingBox:
    """
    Per axis, with L the lower and U the upper bounds of the selected boxes:
        lower = min L + O% * (max L - min L)
        upper = max U - O% * (max U - min U)
    computed in continuous coordinates, then rounded and clipped to the volume.

    Raises:
        FusionError: empty candidate list or invalid config
    """
    config.validate()
    selected = select_candidates(candidates, config)
    lowers = np.array([c.box.lower for c in selected], dtype=np.float64)
    uppers = np.array([c.box.upper for c in selected], dtype=np.float64)
    f = config.offset_percent / 100.0

    lower, upper = [], []
    for axis in range(3):
        lo = lowers[:, axis].min() + f * (lowers[:, axis].max() - lowers[:, axis].min())
        hi = uppers[:, axis].max() - f * (uppers[:, axis].max() - uppers[:, axis].min())
        l, u = _round_lower(lo), _round_upper(hi)
        lower.append(l)
        upper.append(max(u, l + 1))

    box = BoundingBox(tuple(lower), tuple(u - l for l, u in zip(lower, upper)))
    if dims is not None:
        clipped = box.intersected(dims)
        box = clipped if clipped is not None else box.shifted_inside(dims)
    return box


def sweep_offset(items: Sequence[Tuple[Sequence[Candidate], BoundingBox, Optional[Sequence[int]]]],
                 offsets: Sequence[float], config: FusionConfig = FusionConfig()) -> pd.DataFrame:
    """Mean fused-box IOU per offset over (candidates, gt_box, dims) items."""
    rows = []
    for offset in offsets:
        swept = FusionConfig(offset_percent=float(offset), fuse_threshold=config.fuse_threshold)
        values = [iou(fuse(cands, swept, dims), gt) for cands, gt, dims in items]
        rows.append({
            "offset_percent": float(offset),
            "mean_iou": float(np.mean(values)) if values else float("nan"),
            "n_scans": len(values),
        })
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)

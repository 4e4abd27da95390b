"""
Analytic navigation guide: move along the axis farthest from the target centre,
with the movement level chosen from the remaining distance, and correct
predicted actions that lead away from the target.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from nav_env import Action


@dataclass(frozen=True)
class OracleConfig:
    coarse_threshold: int = 12
    fine_threshold: int = 4

    def validate(self):
        if not self.coarse_threshold > self.fine_threshold >= 1:
            raise ValueError(
                f"❌ Need coarse_threshold > fine_threshold >= 1, got "
                f"{self.coarse_threshold}/{self.fine_threshold}"
            )


def imitation_action(current_centre: Sequence[int], gt_centre: Sequence[int],
                     config: OracleConfig = OracleConfig()) -> Action:
    delta = [int(g) - int(c) for c, g in zip(current_centre, gt_centre)]
    if not any(delta):
        return Action.terminate()
    # np.argmax returns the first maximum: ties resolve x -> y -> z
    axis = int(np.argmax([abs(d) for d in delta]))
    distance = abs(delta[axis])
    sign = 0 if delta[axis] > 0 else 1
    if distance >= config.coarse_threshold:
        level = 0
    elif distance >= config.fine_threshold:
        level = 1
    else:
        level = 2
    return Action.move(axis, sign, level)


def _squared_distance(a: Sequence[int], b: Sequence[int]) -> int:
    return sum((int(x) - int(y)) ** 2 for x, y in zip(a, b))


def moves_away(action: Action, current_centre: Sequence[int], gt_centre: Sequence[int]) -> bool:
    """True when the unclipped move strictly increases the Euclidean distance to gt_centre."""
    if action.is_terminate:
        return False
    moved = [c + d for c, d in zip(current_centre, action.delta)]
    return _squared_distance(moved, gt_centre) > _squared_distance(current_centre, gt_centre)


def correct(predicted: Action, current_centre: Sequence[int], gt_centre: Sequence[int],
            config: OracleConfig = OracleConfig()) -> Action:
    at_target = tuple(current_centre) == tuple(gt_centre)
    if (predicted.is_terminate and not at_target) or moves_away(predicted, current_centre, gt_centre):
        return imitation_action(current_centre, gt_centre, config)
    return predicted

"""
Discrete navigation environment: 18 moves (3 axes x 2 signs x 3 levels) plus
Terminate, box movement with clipping at the volume walls, half-size patch
observation and loop detection.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from volume_store import BoundingBox, Triple, Volume, extract_patch

log = logging.getLogger(__name__)

AXES = ("x", "y", "z")
SIGNS = ("+", "-")
LEVELS = ("coarse", "fine", "very-fine")
STEP_SIZES = (9, 3, 1)
TERMINATE_INDEX = 18
ACTION_COUNT = 19

TERMINATE_ACTION = "terminate-action"
STEP_CAP = "step-cap"
LOOP = "loop"


class EpisodeError(ValueError):
    """Raised when acting on a finished episode."""


@dataclass(frozen=True)
class Action:
    """A move (axis, sign, level) or Terminate (all three None)."""

    axis: Optional[int] = None
    sign: Optional[int] = None
    level: Optional[int] = None

    @property
    def is_terminate(self) -> bool:
        return self.axis is None

    @property
    def index(self) -> int:
        if self.is_terminate:
            return TERMINATE_INDEX
        return self.axis * 6 + self.sign * 3 + self.level

    @property
    def delta(self) -> Triple:
        """Centre displacement before clipping."""
        d = [0, 0, 0]
        if not self.is_terminate:
            d[self.axis] = STEP_SIZES[self.level] * (1 if self.sign == 0 else -1)
        return tuple(d)

    @classmethod
    def move(cls, axis: int, sign: int, level: int) -> "Action":
        if axis not in (0, 1, 2) or sign not in (0, 1) or level not in (0, 1, 2):
            raise ValueError(f"❌ Invalid move axis={axis} sign={sign} level={level}")
        return cls(axis, sign, level)

    @classmethod
    def terminate(cls) -> "Action":
        return cls()

    @classmethod
    def from_index(cls, index: int) -> "Action":
        index = int(index)
        if index == TERMINATE_INDEX:
            return cls.terminate()
        if not 0 <= index < TERMINATE_INDEX:
            raise ValueError(f"❌ Action index out of range: {index}")
        return cls.move(index // 6, (index % 6) // 3, index % 3)

    def __str__(self) -> str:
        if self.is_terminate:
            return "Terminate"
        return f"Move({AXES[self.axis]},{SIGNS[self.sign]},{LEVELS[self.level]})"


@dataclass(frozen=True)
class EpisodeState:
    current_box: BoundingBox
    step: int = 0
    visited_centres: Tuple[Triple, ...] = field(default_factory=tuple)
    terminated: bool = False
    terminal_reason: Optional[str] = None

    @classmethod
    def start(cls, box: BoundingBox) -> "EpisodeState":
        return cls(current_box=box, visited_centres=(box.centre_voxel,))

    @property
    def centre(self) -> Triple:
        return self.current_box.centre_voxel


def start_box(centre: Sequence[int], size: Sequence[int], dims: Sequence[int]) -> BoundingBox:
    return BoundingBox.from_centre(centre, size).shifted_inside(dims)


def navigable_centre(target: Sequence[int], size: Sequence[int], dims: Sequence[int]) -> Triple:
    """Nearest centre a box of `size` can occupy while staying inside the volume."""
    out = []
    for t, s, d in zip(target, size, dims):
        s = min(int(s), int(d))
        out.append(int(min(max(int(t), s // 2), int(d) - s + s // 2)))
    return tuple(out)


def apply_action(state: EpisodeState, action: Action, volume_dims: Sequence[int],
                 step_cap: Optional[int] = None) -> EpisodeState:
    """
    Move the box centre by 9/3/1 voxels (clipped to stay inside the volume) or terminate.

    Raises:
        EpisodeError: the state is already terminated
    """
    if state.terminated:
        raise EpisodeError(f"❌ Cannot act on a terminated episode (reason: {state.terminal_reason})")
    step = state.step + 1
    if action.is_terminate:
        return replace(state, step=step, terminated=True, terminal_reason=TERMINATE_ACTION)

    box = state.current_box.translated(action.delta).shifted_inside(volume_dims)
    new_state = replace(
        state,
        current_box=box,
        step=step,
        visited_centres=state.visited_centres + (box.centre_voxel,),
    )
    if step_cap is not None and step >= step_cap:
        new_state = replace(new_state, terminated=True, terminal_reason=STEP_CAP)
    return new_state


def observation_box(box: BoundingBox) -> BoundingBox:
    """Same centre, half the size (floor, at least 1 voxel)."""
    half = tuple(max(1, s // 2) for s in box.size)
    return BoundingBox.from_centre(box.centre_voxel, half)


def observe(state: EpisodeState, volume: Volume, net_input_shape: Sequence[int]) -> np.ndarray:
    return extract_patch(volume, observation_box(state.current_box), net_input_shape)


def detect_loop(state: EpisodeState) -> bool:
    centres = state.visited_centres
    return len(centres) > 1 and centres[-1] in centres[:-1]


class TraceWriter:
    """Optional JSON-lines episode trace: {step, centre, action_index, predicted_confidence},
    plus an "episode" label once start_episode has been called."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")
        self.episode: Optional[str] = None

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc):
        self.close()

    def start_episode(self, label: str):
        self.episode = str(label)

    def write(self, step: int, centre: Sequence[int], action_index: int,
              predicted_confidence: Optional[float] = None):
        record = {
            "step": int(step),
            "centre": [int(c) for c in centre],
            "action_index": int(action_index),
            "predicted_confidence": None if predicted_confidence is None else round(float(predicted_confidence), 6),
        }
        if self.episode is not None:
            record["episode"] = self.episode
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

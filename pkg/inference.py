"""
Test-time localisation: greedy navigation with the trained policy (no imitation,
no correction), stopped by Terminate, the step cap or a revisited centre. Each
architecture yields two candidates, the terminal-state box and the mean of the
last 10 states, for 6 candidates per scan.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from geometry_metrics import MetricReport, evaluate_box, iou
from nav_env import (LOOP, STEP_CAP, TERMINATE_ACTION, Action, EpisodeState, TraceWriter,
                     apply_action, detect_loop, observe, start_box)
from neural_core import ARCH_IDS, ModelBundle, NetworkError
from volume_store import Annotation, BoundingBox, Volume

log = logging.getLogger(__name__)

TERMINAL = "terminal"
LAST10MEAN = "last10mean"
READOUTS = (TERMINAL, LAST10MEAN)

Policy = Callable[[EpisodeState, np.ndarray], Action]
BoxPredictor = Callable[[np.ndarray], Tuple[np.ndarray, float]]


class InferenceError(ValueError):
    """Raised when a model bundle cannot be used for localisation."""


@dataclass(frozen=True)
class InferenceConfig:
    step_cap: int = 25
    mean_window: int = 10


@dataclass(frozen=True)
class Candidate:
    box: BoundingBox
    confidence: float
    arch_id: int
    readout: str

    def __post_init__(self):
        object.__setattr__(self, "confidence", float(min(max(self.confidence, 0.0), 1.0)))

    def to_json(self) -> dict:
        return {"arch": self.arch_id, "readout": self.readout, "lower": list(self.box.lower),
                "size": list(self.box.size), "confidence": round(self.confidence, 6)}

    @classmethod
    def from_json(cls, data: dict) -> "Candidate":
        return cls(BoundingBox(tuple(data["lower"]), tuple(data["size"])),
                   float(data["confidence"]), int(data["arch"]), str(data["readout"]))


@dataclass
class Rollout:
    final_state: EpisodeState
    predictions: List[Tuple[np.ndarray, float]]
    steps: int
    reason: str


def greedy_rollout(volume: Volume, start: EpisodeState, policy: Policy, predict_box: BoxPredictor,
                   patch_shape: Sequence[int], config: InferenceConfig = InferenceConfig(),
                   trace: Optional[TraceWriter] = None) -> Rollout:
    """
    The box predictor runs on every visited state. On a loop the state before the
    repeated centre is final. Terminate counts as a step.
    """
    dims = volume.dims
    state = start
    predictions = []
    steps = 0
    while True:
        patch = observe(state, volume, patch_shape)
        predictions.append(predict_box(patch))
        if steps >= config.step_cap:
            reason = STEP_CAP
            break
        action = policy(state, patch)
        if trace:
            trace.write(steps, state.centre, action.index, predictions[-1][1])
        nxt = apply_action(state, action, dims)
        steps += 1
        if action.is_terminate:
            state, reason = nxt, TERMINATE_ACTION
            break
        if detect_loop(nxt):
            reason = LOOP
            break
        state = nxt
    return Rollout(state, predictions, steps, reason)


def _box_from_sizes(centre: Sequence[int], sizes_norm: np.ndarray, dims: Sequence[int]) -> BoundingBox:
    sizes = tuple(max(1, int(round(float(s) * d))) for s, d in zip(sizes_norm, dims))
    return BoundingBox.from_centre(centre, sizes).shifted_inside(dims)


def candidates_from_rollout(rollout: Rollout, arch_id: int, dims: Sequence[int],
                            mean_window: int = 10) -> List[Candidate]:
    centre = rollout.final_state.centre
    sizes, confidence = rollout.predictions[-1]
    window = rollout.predictions[-mean_window:]
    mean_sizes = np.mean([p[0] for p in window], axis=0)
    mean_confidence = float(np.mean([p[1] for p in window]))
    return [
        Candidate(_box_from_sizes(centre, sizes, dims), confidence, arch_id, TERMINAL),
        Candidate(_box_from_sizes(centre, mean_sizes, dims), mean_confidence, arch_id, LAST10MEAN),
    ]


def localize(volume: Volume, bundle: ModelBundle, config: InferenceConfig = InferenceConfig(),
             trace: Optional[TraceWriter] = None) -> List[Candidate]:
    """
    Greedy rollout per architecture from the volume centre with the pre-selected box size.

    Raises:
        InferenceError: a navigation or bbox network is missing from the bundle
    """
    dims = volume.dims
    centre = tuple(d // 2 for d in dims)
    candidates = []
    for arch_id in ARCH_IDS:
        try:
            nav = bundle.navigation(arch_id)
            bbox = bundle.bbox(arch_id)
        except NetworkError as e:
            raise InferenceError(str(e))

        def policy(state, patch, nav=nav):
            return Action.from_index(int(np.argmax(nav.predict(patch)[0])))

        def predict_box(patch, bbox=bbox):
            out = bbox.predict(patch)[0]
            return out[:3].astype(np.float64), float(out[3])

        if trace:
            trace.start_episode(f"arch{arch_id}")
        start = EpisodeState.start(start_box(centre, bundle.box_size, dims))
        rollout = greedy_rollout(volume, start, policy, predict_box, bundle.patch_shape, config, trace)
        log.debug("arch %d: %d steps, stop=%s, centre=%s", arch_id, rollout.steps, rollout.reason,
                  rollout.final_state.centre)
        candidates.extend(candidates_from_rollout(rollout, arch_id, dims, config.mean_window))
    return candidates


def localize_many(volumes: Sequence[Volume], bundle: ModelBundle,
                  config: InferenceConfig = InferenceConfig(), threads: int = 1) -> List[List[Candidate]]:
    """Results come back in input order whatever the thread count."""
    if threads <= 1 or len(volumes) <= 1:
        return [localize(v, bundle, config) for v in volumes]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda v: localize(v, bundle, config), volumes))


def best_candidate(candidates: Sequence[Candidate]) -> Candidate:
    """Highest predicted confidence; first in list order on ties."""
    return max(candidates, key=lambda c: c.confidence)


def oracle_best_candidate(candidates: Sequence[Candidate], truth: BoundingBox) -> Candidate:
    """Highest true IOU. Label-dependent: for analysis only."""
    return max(candidates, key=lambda c: iou(c.box, truth))


def evaluate(prediction, annotation: Annotation, spacing: Sequence[float]) -> MetricReport:
    """`prediction` is a BoundingBox, a Candidate, or a candidate list (the best by confidence)."""
    if isinstance(prediction, (list, tuple)):
        prediction = best_candidate(prediction)
    box = prediction.box if isinstance(prediction, Candidate) else prediction
    return evaluate_box(annotation.scan_id, box, annotation.gt_box, spacing)


def save_candidates(path, candidates: Sequence[Candidate]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([c.to_json() for c in candidates], indent=2), encoding="utf-8")
    return path


def load_candidates(path) -> List[Candidate]:
    return [Candidate.from_json(item) for item in json.loads(Path(path).read_text(encoding="utf-8"))]

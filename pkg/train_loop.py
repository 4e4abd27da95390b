"""
Imitation-guided training of the navigation and bounding-box networks.

This module handles:
- Episode collection: epsilon mixture of imitation and greedy actions, with
  every chosen action passed through the correction rule before it is stored
- Replay memories D (observation, action) and B (observation, gt sizes, iou)
- Per-cycle mini-batch MSE training of all six networks

Usage:
    from train_loop import TrainConfig, run_training

    bundle, training_log = run_training(scans, TrainConfig(cycles=3))
    training_log.to_csv("training_log.csv", index=False)
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from geometry_metrics import iou
from imitation_oracle import OracleConfig, correct, imitation_action
from nav_env import (TERMINATE_INDEX, ACTION_COUNT, Action, EpisodeState, TraceWriter,
                     apply_action, navigable_centre, observe, start_box)
from neural_core import ARCH_IDS, SGD, ModelBundle, Network, mse_loss
from volume_store import Scan

log = logging.getLogger(__name__)

TRAINING_LOG_COLUMNS = ["cycle", "nav_loss", "bbox_loss", "epsilon"]


class TrainingError(ValueError):
    """Raised on an unusable dataset or a diverging loss."""


@dataclass(frozen=True)
class TrainConfig:
    cycles: int = 10
    steps_cap: int = 60
    epsilon_start: float = 1.0
    epsilon_end: float = 0.3
    iou_threshold: float = 1.0 / 3.0
    policy_capacity: int = 20000
    bbox_capacity: int = 20000
    batch_size: int = 32
    epochs_per_cycle: int = 1
    lr: float = 0.1
    momentum: float = 0.9
    clip_norm: float = 1.0
    start_points: str = "grid"
    box_size: Tuple[int, ...] = ()
    patch_shape: Tuple[int, int, int] = (16, 16, 16)
    channel_widths: Tuple[int, int, int] = (16, 32, 32)
    seed: int = 0

    def validate(self):
        if self.cycles < 1 or self.steps_cap < 1:
            raise TrainingError("❌ cycles and steps_cap must be >= 1")
        for eps in (self.epsilon_start, self.epsilon_end):
            if not 0.0 <= eps <= 1.0:
                raise TrainingError(f"❌ epsilon must lie in [0, 1], got {eps}")
        if self.lr <= 0 or self.clip_norm < 0:
            raise TrainingError(f"❌ lr must be > 0 and clip_norm >= 0 (0 disables), got {self.lr}, {self.clip_norm}")
        if min(self.policy_capacity, self.bbox_capacity) <= self.batch_size:
            raise TrainingError("❌ replay capacities must exceed the batch size")
        if self.start_points not in ("centre", "grid"):
            raise TrainingError(f"❌ start_points must be 'centre' or 'grid', got {self.start_points}")
        if self.box_size and len(self.box_size) != 3:
            raise TrainingError(f"❌ box_size needs 3 values or none, got {self.box_size}")

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class PolicySample:
    patch: np.ndarray
    action_index: int

    def __post_init__(self):
        if not 0 <= self.action_index < ACTION_COUNT:
            raise TrainingError(f"❌ Invalid action index {self.action_index}")


@dataclass
class BBoxSample:
    patch: np.ndarray
    gt_sizes: np.ndarray
    iou: float


class ReplayMemory:
    """Ring buffer; the oldest sample is overwritten once full."""

    def __init__(self, capacity: int, min_iou: Optional[float] = None):
        self.capacity = capacity
        self.min_iou = min_iou
        self._items: list = []
        self._position = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, sample):
        if self.min_iou is not None and sample.iou < self.min_iou:
            raise TrainingError(f"❌ bbox sample iou {sample.iou:.4f} below threshold {self.min_iou:.4f}")
        if len(self._items) < self.capacity:
            self._items.append(sample)
        else:
            self._items[self._position] = sample
        self._position = (self._position + 1) % self.capacity

    def extend(self, samples):
        for s in samples:
            self.push(s)

    def sample(self, rng: np.random.Generator, batch_size: int) -> list:
        idx = rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in idx]


def epsilon_at(config: TrainConfig, cycle: int) -> float:
    """Linear schedule from epsilon_start (first cycle) to epsilon_end (last cycle)."""
    if config.cycles == 1:
        return config.epsilon_start
    t = cycle / (config.cycles - 1)
    return config.epsilon_start + (config.epsilon_end - config.epsilon_start) * t


def start_fractions(config: TrainConfig) -> List[Tuple[float, float, float]]:
    points = [(0.5, 0.5, 0.5)]
    if config.start_points == "grid":
        points += list(itertools.product((0.25, 0.75), repeat=3))
    return points


def mean_box_size(scans: Sequence[Scan]) -> Tuple[int, int, int]:
    sizes = np.array([s.annotation.gt_box.size for s in scans], dtype=np.float64)
    return tuple(max(1, int(round(v))) for v in sizes.mean(axis=0))


def collect_episode(scan: Scan, policy: Optional[Network], config: TrainConfig, epsilon: float,
                    start_centre: Sequence[int], box_size: Sequence[int], rng: np.random.Generator,
                    oracle: OracleConfig = OracleConfig(),
                    trace: Optional[TraceWriter] = None) -> Tuple[List[PolicySample], List[BBoxSample]]:
    """
    One guided episode. The stored action is always the post-correction action;
    bbox samples are captured at every state whose box overlaps gt with iou >= threshold.

    Raises:
        TrainingError: the scan has no annotation
    """
    if scan.annotation is None:
        raise TrainingError(f"❌ missing annotation for scan {scan.scan_id}")
    volume, gt = scan.volume, scan.annotation.gt_box
    dims = volume.dims
    target = navigable_centre(gt.centre_voxel, box_size, dims)
    gt_sizes = np.array(gt.size, dtype=np.float32) / np.array(dims, dtype=np.float32)

    state = EpisodeState.start(start_box(start_centre, box_size, dims))
    policy_samples, bbox_samples = [], []
    for _ in range(config.steps_cap):
        patch = observe(state, volume, config.patch_shape)
        overlap = iou(state.current_box, gt)
        if overlap >= config.iou_threshold:
            bbox_samples.append(BBoxSample(patch, gt_sizes, overlap))

        if state.centre == target:
            policy_samples.append(PolicySample(patch, TERMINATE_INDEX))
            if trace:
                trace.write(state.step, state.centre, TERMINATE_INDEX)
            break

        explore = rng.random() < epsilon
        if explore or policy is None:
            action = imitation_action(state.centre, target, oracle)
        else:
            action = Action.from_index(int(np.argmax(policy.predict(patch)[0])))
        action = correct(action, state.centre, target, oracle)
        assert correct(action, state.centre, target, oracle) == action, "stored action leads away from target"

        policy_samples.append(PolicySample(patch, action.index))
        if trace:
            trace.write(state.step, state.centre, action.index)
        state = apply_action(state, action, dims)
    return policy_samples, bbox_samples


def _train_network(network: Network, optimizer: SGD, memory: ReplayMemory, targets_of,
                   config: TrainConfig, rng: np.random.Generator) -> float:
    losses = []
    batches = max(1, len(memory) // config.batch_size)
    for _ in range(config.epochs_per_cycle * batches):
        batch = memory.sample(rng, config.batch_size)
        x = np.stack([s.patch for s in batch])
        y = targets_of(batch)
        loss, grad = mse_loss(network.forward(x, mode="train"), y)
        if not np.isfinite(loss):
            raise TrainingError(f"❌ non-finite loss while training {network.name}")
        optimizer.step(network.params, network.backward(grad))
        losses.append(loss)
    return float(np.mean(losses))


def _policy_targets(batch: List[PolicySample]) -> np.ndarray:
    y = np.zeros((len(batch), ACTION_COUNT), dtype=np.float32)
    y[np.arange(len(batch)), [s.action_index for s in batch]] = 1.0
    return y


def _bbox_targets(batch: List[BBoxSample]) -> np.ndarray:
    return np.stack([np.append(s.gt_sizes, s.iou) for s in batch]).astype(np.float32)


def run_training(scans: Sequence[Scan], config: TrainConfig, oracle: OracleConfig = OracleConfig(),
                 init_bundle: Optional[ModelBundle] = None,
                 trace: Optional[TraceWriter] = None) -> Tuple[ModelBundle, pd.DataFrame]:
    """
    For each cycle: collect one episode per (start point, scan) into D and B,
    then train the navigation and bbox networks of all three architectures.
    Episodes rotate the greedy policy through the three navigation networks.

    Raises:
        TrainingError: fewer than 2 labelled scans, or a non-finite loss
    """
    config.validate()
    oracle.validate()
    scans = list(scans)
    if not scans:
        raise TrainingError("❌ empty dataset")
    if len(scans) < 2:
        raise TrainingError(f"❌ need at least 2 labelled scans, got {len(scans)}")
    missing = [s.scan_id for s in scans if s.annotation is None]
    if missing:
        raise TrainingError(f"❌ scans without annotation: {', '.join(missing[:5])}")

    box_size = tuple(config.box_size) if config.box_size else mean_box_size(scans)
    if init_bundle is not None:
        bundle = init_bundle.copy()
        bundle.box_size = box_size
    else:
        bundle = ModelBundle.create(config.patch_shape, config.channel_widths, box_size,
                                    seed=config.seed, fingerprint=config.fingerprint())
    bundle.config_fingerprint = config.fingerprint()

    rng = np.random.default_rng(config.seed)
    policy_memory = ReplayMemory(config.policy_capacity)
    bbox_memory = ReplayMemory(config.bbox_capacity, min_iou=config.iou_threshold)
    optimizers = {key: SGD(config.lr, config.momentum, config.clip_norm or None) for key in bundle.networks}

    rows = []
    for cycle in range(config.cycles):
        epsilon = epsilon_at(config, cycle)
        episode = 0
        for fraction in start_fractions(config):
            for i in rng.permutation(len(scans)):
                scan = scans[i]
                start = tuple(int(f * d) for f, d in zip(fraction, scan.volume.dims))
                policy = bundle.navigation(ARCH_IDS[episode % len(ARCH_IDS)])
                if trace:
                    trace.start_episode(f"cycle{cycle + 1}/{scan.scan_id}/start{episode}")
                p, b = collect_episode(scan, policy, config, epsilon, start, box_size, rng, oracle, trace)
                policy_memory.extend(p)
                bbox_memory.extend(b)
                episode += 1

        nav_losses, bbox_losses = [], []
        for arch_id in ARCH_IDS:
            nav_losses.append(_train_network(bundle.navigation(arch_id), optimizers[(arch_id, "navigation")],
                                             policy_memory, _policy_targets, config, rng))
            if len(bbox_memory):
                bbox_losses.append(_train_network(bundle.bbox(arch_id), optimizers[(arch_id, "bbox")],
                                                  bbox_memory, _bbox_targets, config, rng))
        row = {
            "cycle": cycle + 1,
            "nav_loss": float(np.mean(nav_losses)),
            "bbox_loss": float(np.mean(bbox_losses)) if bbox_losses else float("nan"),
            "epsilon": epsilon,
        }
        rows.append(row)
        log.info("cycle %d/%d: eps=%.3f nav_loss=%.5f bbox_loss=%.5f |D|=%d |B|=%d",
                 cycle + 1, config.cycles, epsilon, row["nav_loss"], row["bbox_loss"],
                 len(policy_memory), len(bbox_memory))
    return bundle, pd.DataFrame(rows, columns=TRAINING_LOG_COLUMNS)

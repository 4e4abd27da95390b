import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from imitation_oracle import OracleConfig, imitation_action  # noqa: E402
from inference import Candidate  # noqa: E402
from train_loop import TrainConfig  # noqa: E402
from volume_store import (BoundingBox, PhantomConfig, Scan, Volume,  # noqa: E402
                          generate_phantom)

SMALL_PHANTOM = PhantomConfig(
    dims=(24, 24, 24),
    spacing=(1.0, 1.0, 2.0),
    noise_sigma=10.0,
    organ_semi_axes=(3, 5, 3, 5, 2, 4),
    distractor_semi_axes=(1, 2),
    distractor_count=2,
)


def make_scans(count, config=SMALL_PHANTOM, start_seed=0):
    scans = []
    for i in range(count):
        volume, annotation = generate_phantom(
            replace(config, seed=start_seed + i), scan_id=f"scan_{i:02d}"
        )
        scans.append(Scan(annotation.scan_id, volume, annotation))
    return scans


def make_candidates(boxes_by_arch, confidences):
    """boxes_by_arch: {arch: (terminal_box, mean_box)}, confidences: {arch: (c_terminal, c_mean)}"""
    out = []
    for arch, (terminal, mean) in sorted(boxes_by_arch.items()):
        c_t, c_m = confidences[arch]
        out.append(Candidate(terminal, c_t, arch, "terminal"))
        out.append(Candidate(mean, c_m, arch, "last10mean"))
    return out


@pytest.fixture
def small_phantom_config():
    return SMALL_PHANTOM


@pytest.fixture
def phantom_scans():
    return make_scans(4)


@pytest.fixture
def constant_volume():
    return Volume(np.full((16, 16, 16), 100, dtype=np.int16), (1.0, 1.0, 1.0))


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        cycles=2,
        steps_cap=30,
        batch_size=4,
        policy_capacity=500,
        bbox_capacity=500,
        start_points="centre",
        patch_shape=(4, 4, 4),
        channel_widths=(2, 2, 2),
        seed=3,
    )


@pytest.fixture
def oracle_policy():
    """Navigation stub that follows the imitation oracle towards a fixed target."""

    def build(target, config=OracleConfig()):
        def policy(state, patch):
            return imitation_action(state.centre, target, config)
        return policy

    return build


@pytest.fixture
def unit_box():
    return BoundingBox((0, 0, 0), (4, 4, 4))

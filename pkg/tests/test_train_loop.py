from dataclasses import replace

import numpy as np
import pytest

from conftest import make_scans
from imitation_oracle import imitation_action
from inference import candidates_from_rollout, evaluate, greedy_rollout, localize
from nav_env import (ACTION_COUNT, TERMINATE_INDEX, Action, EpisodeState, apply_action, navigable_centre,
                     start_box)
from neural_core import ModelBundle, mse_loss
from train_loop import (TRAINING_LOG_COLUMNS, BBoxSample, PolicySample, ReplayMemory, TrainConfig,
                        TrainingError, collect_episode, epsilon_at, mean_box_size, run_training,
                        start_fractions)
from volume_store import Scan


@pytest.fixture
def scan():
    return make_scans(1, start_seed=21)[0]


def _target(scan, box_size):
    return navigable_centre(scan.annotation.gt_box.centre_voxel, box_size, scan.volume.dims)


def test_full_exploration_follows_the_oracle(scan, tiny_train_config):
    box_size = (8, 8, 8)
    start = (4, 19, 6)
    policy_samples, _ = collect_episode(scan, None, tiny_train_config, 1.0, start, box_size,
                                        np.random.default_rng(0))
    target = _target(scan, box_size)
    dims = scan.volume.dims
    state = EpisodeState.start(start_box(start, box_size, dims))
    for sample in policy_samples:
        expected = imitation_action(state.centre, target)
        assert sample.action_index == expected.index
        if expected.is_terminate:
            break
        state = apply_action(state, expected, dims)
    assert policy_samples[-1].action_index == TERMINATE_INDEX
    assert state.centre == target


def test_start_at_target_stores_a_single_terminate(scan, tiny_train_config):
    gt = scan.annotation.gt_box
    box_size = gt.size
    start = _target(scan, box_size)
    policy_samples, bbox_samples = collect_episode(scan, None, tiny_train_config, 1.0, start, box_size,
                                                   np.random.default_rng(0))
    assert [s.action_index for s in policy_samples] == [TERMINATE_INDEX]
    assert len(bbox_samples) == 1 and bbox_samples[0].iou == 1.0
    np.testing.assert_allclose(bbox_samples[0].gt_sizes, np.array(gt.size) / np.array(scan.volume.dims))


def test_greedy_episode_stores_corrected_actions(scan, tiny_train_config):
    bundle = ModelBundle.create(tiny_train_config.patch_shape, tiny_train_config.channel_widths, (8, 8, 8))
    box_size = (8, 8, 8)
    start = (4, 4, 4)
    policy_samples, bbox_samples = collect_episode(scan, bundle.navigation(1), tiny_train_config, 0.0,
                                                   start, box_size, np.random.default_rng(1))
    target = _target(scan, box_size)
    dims = scan.volume.dims
    state = EpisodeState.start(start_box(start, box_size, dims))
    for sample in policy_samples:
        action = Action.from_index(sample.action_index)
        if action.is_terminate:
            assert state.centre == target
            break
        before = sum((c - t) ** 2 for c, t in zip(state.centre, target))
        state = apply_action(state, action, dims)
        assert sum((c - t) ** 2 for c, t in zip(state.centre, target)) <= before
    assert all(s.iou >= tiny_train_config.iou_threshold for s in bbox_samples)


def test_missing_annotation_is_rejected(scan, tiny_train_config):
    with pytest.raises(TrainingError, match="missing annotation"):
        collect_episode(scan.without_annotation(), None, tiny_train_config, 1.0, (12, 12, 12), (8, 8, 8),
                        np.random.default_rng(0))


def test_replay_memory_is_a_ring_buffer():
    memory = ReplayMemory(3)
    for i in range(5):
        memory.push(PolicySample(np.zeros(1), i))
    assert len(memory) == 3
    assert {s.action_index for s in memory.sample(np.random.default_rng(0), 200)} == {2, 3, 4}


def test_bbox_memory_rejects_low_overlap():
    memory = ReplayMemory(10, min_iou=1 / 3)
    memory.push(BBoxSample(np.zeros(1), np.ones(3), 1 / 3))
    with pytest.raises(TrainingError):
        memory.push(BBoxSample(np.zeros(1), np.ones(3), 0.2))
    with pytest.raises(TrainingError):
        PolicySample(np.zeros(1), 19)


def test_epsilon_schedule():
    config = TrainConfig(cycles=5, epsilon_start=1.0, epsilon_end=0.3)
    assert [round(epsilon_at(config, c), 6) for c in range(5)] == [1.0, 0.825, 0.65, 0.475, 0.3]
    assert epsilon_at(replace(config, cycles=1), 0) == 1.0


def test_start_fractions():
    assert start_fractions(TrainConfig(start_points="centre")) == [(0.5, 0.5, 0.5)]
    grid = start_fractions(TrainConfig(start_points="grid"))
    assert len(grid) == 9 and grid[0] == (0.5, 0.5, 0.5) and (0.25, 0.75, 0.25) in grid


def test_config_validation():
    with pytest.raises(TrainingError):
        TrainConfig(batch_size=32, policy_capacity=32).validate()
    with pytest.raises(TrainingError):
        TrainConfig(epsilon_end=1.5).validate()
    with pytest.raises(TrainingError):
        TrainConfig(start_points="random").validate()
    assert TrainConfig().fingerprint() == TrainConfig().fingerprint()
    assert TrainConfig(seed=1).fingerprint() != TrainConfig().fingerprint()


def test_mean_box_size(phantom_scans):
    sizes = np.array([s.annotation.gt_box.size for s in phantom_scans]).mean(axis=0)
    assert mean_box_size(phantom_scans) == tuple(int(round(v)) for v in sizes)


def test_training_needs_two_labelled_scans(tiny_train_config):
    scans = make_scans(2)
    with pytest.raises(TrainingError, match="at least 2"):
        run_training(scans[:1], tiny_train_config)
    with pytest.raises(TrainingError, match="without annotation"):
        run_training([scans[0], Scan("bare", scans[1].volume)], tiny_train_config)


def test_training_is_deterministic(tiny_train_config):
    scans = make_scans(3)
    bundle_a, log_a = run_training(scans, tiny_train_config)
    bundle_b, log_b = run_training(scans, tiny_train_config)

    assert list(log_a.columns) == TRAINING_LOG_COLUMNS
    assert log_a["cycle"].tolist() == [1, 2]
    assert log_a["epsilon"].tolist() == pytest.approx([1.0, 0.3])
    assert np.all(np.isfinite(log_a["nav_loss"]))
    assert log_a.equals(log_b)

    assert bundle_a.box_size == mean_box_size(scans)
    assert bundle_a.config_fingerprint == tiny_train_config.fingerprint()
    for key, network in bundle_a.networks.items():
        for name, value in network.params.items():
            np.testing.assert_array_equal(value, bundle_b.networks[key].params[name])


def test_warm_start_leaves_the_initial_bundle_untouched(tiny_train_config):
    scans = make_scans(2)
    config = replace(tiny_train_config, cycles=1)
    init = ModelBundle.create(config.patch_shape, config.channel_widths, (5, 5, 5), seed=8)
    before = {name: value.copy() for name, value in init.navigation(1).params.items()}
    bundle, _ = run_training(scans, config, init_bundle=init)
    assert bundle.box_size == mean_box_size(scans)
    assert init.box_size == (5, 5, 5)
    for name, value in init.navigation(1).params.items():
        np.testing.assert_array_equal(value, before[name])
    assert any(not np.array_equal(bundle.navigation(1).params[n], before[n]) for n in before)


# =================================================================
# Learning behaviour
# =================================================================

def _bundle_box(bundle, arch_id):
    bbox = bundle.bbox(arch_id)

    def predict_box(patch):
        out = bbox.predict(patch)[0]
        return out[:3].astype(np.float64), float(out[3])
    return predict_box


def test_trained_box_head_recovers_the_organ(tiny_train_config, oracle_policy):
    scan = make_scans(1)[0]
    twin = Scan("twin", scan.volume, scan.annotation)
    config = replace(tiny_train_config, cycles=3, start_points="grid", epochs_per_cycle=3)
    bundle, training_log = run_training([scan, twin], config)
    assert np.all(np.isfinite(training_log["bbox_loss"]))

    dims = scan.volume.dims
    target = navigable_centre(scan.annotation.gt_box.centre_voxel, bundle.box_size, dims)
    centre = tuple(d // 2 for d in dims)
    for arch_id in (1, 2, 3):
        start = EpisodeState.start(start_box(centre, bundle.box_size, dims))
        rollout = greedy_rollout(scan.volume, start, oracle_policy(target), _bundle_box(bundle, arch_id),
                                 bundle.patch_shape)
        assert rollout.final_state.centre == target
        terminal = candidates_from_rollout(rollout, arch_id, dims)[0]
        assert evaluate(terminal, scan.annotation, scan.volume.spacing).dice >= 0.5
        assert 0.0 < terminal.confidence < 0.99

    for candidate in localize(scan.volume, bundle):
        assert min(candidate.box.size) >= 2


def _held_out_nav_loss(bundle, x, y):
    return float(np.mean([mse_loss(bundle.navigation(a).forward(x, mode="train"), y)[0] for a in (1, 2, 3)]))


def test_full_exploration_lowers_held_out_navigation_loss(tiny_train_config):
    scans = make_scans(3)
    held = make_scans(1, start_seed=40)[0]
    config = replace(tiny_train_config, epsilon_start=1.0, epsilon_end=1.0, start_points="grid",
                     batch_size=8, epochs_per_cycle=4)
    box_size = mean_box_size(scans)

    rng = np.random.default_rng(99)
    samples = []
    for fraction in start_fractions(config):
        start = tuple(int(f * d) for f, d in zip(fraction, held.volume.dims))
        samples += collect_episode(held, None, config, 1.0, start, box_size, rng)[0]
    x = np.stack([s.patch for s in samples])
    y = np.zeros((len(samples), ACTION_COUNT))
    y[np.arange(len(samples)), [s.action_index for s in samples]] = 1.0

    losses = [_held_out_nav_loss(ModelBundle.create(config.patch_shape, config.channel_widths, box_size,
                                                    seed=config.seed), x, y)]
    for cycles in range(1, 6):
        bundle, _ = run_training(scans, replace(config, cycles=cycles))
        losses.append(_held_out_nav_loss(bundle, x, y))
    assert np.all(np.isfinite(losses))
    non_increasing = sum(b <= a for a, b in zip(losses, losses[1:]))
    assert non_increasing >= 4, losses

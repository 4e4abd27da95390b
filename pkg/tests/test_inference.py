import numpy as np
import pytest

import imitation_oracle
import inference
import nav_env
import train_loop
from conftest import make_scans
from inference import (LAST10MEAN, READOUTS, TERMINAL, Candidate, InferenceConfig, InferenceError, Rollout,
                       best_candidate, candidates_from_rollout, evaluate, greedy_rollout, load_candidates,
                       localize, localize_many, oracle_best_candidate, save_candidates)
from nav_env import LOOP, STEP_CAP, TERMINATE_ACTION, Action, EpisodeState, start_box
from neural_core import ModelBundle
from volume_store import Annotation, BoundingBox, Volume

DIMS = (64, 64, 64)


@pytest.fixture
def volume():
    return Volume(np.full(DIMS, 40, dtype=np.int16), (1.0, 1.0, 1.0))


def _constant_box(sizes=(0.25, 0.25, 0.25), confidence=0.7):
    def predict(patch):
        return np.array(sizes), confidence
    return predict


def _start(centre=(32, 32, 32), size=(10, 10, 10)):
    return EpisodeState.start(start_box(centre, size, DIMS))


def test_oracle_policy_reaches_the_target(volume, oracle_policy):
    target = (50, 20, 40)
    rollout = greedy_rollout(volume, _start(), oracle_policy(target), _constant_box(), (4, 4, 4))
    assert rollout.reason == TERMINATE_ACTION
    assert rollout.final_state.centre == target
    assert rollout.steps == len(rollout.final_state.visited_centres)
    assert len(rollout.predictions) == rollout.steps


def test_pushing_against_the_wall_ends_in_a_loop(volume):
    rollout = greedy_rollout(volume, _start(), lambda state, patch: Action.move(0, 0, 1),
                             _constant_box(), (4, 4, 4))
    assert rollout.reason == LOOP
    assert rollout.steps <= 25
    assert rollout.final_state.centre == (59, 32, 32)


def test_step_cap(volume, oracle_policy):
    rollout = greedy_rollout(volume, _start(), oracle_policy((58, 6, 58)), _constant_box(), (4, 4, 4),
                             InferenceConfig(step_cap=3))
    assert rollout.reason == STEP_CAP
    assert rollout.steps == 3
    assert len(rollout.predictions) == 4


def test_constant_box_head_gives_matching_candidates(volume, oracle_policy):
    rollout = greedy_rollout(volume, _start(), oracle_policy((40, 40, 40)), _constant_box(), (4, 4, 4))
    terminal, mean = candidates_from_rollout(rollout, 2, DIMS)
    for candidate in (terminal, mean):
        assert candidate.box.size == (16, 16, 16)
        assert candidate.box.centre_voxel == (40, 40, 40)
        assert candidate.confidence == pytest.approx(0.7)
        assert candidate.arch_id == 2
    assert (terminal.readout, mean.readout) == (TERMINAL, LAST10MEAN)


def test_mean_readout_uses_the_last_ten_predictions():
    state = EpisodeState.start(BoundingBox.from_centre((10, 10, 10), (4, 4, 4)))
    predictions = [(np.array([0.5, 0.5, 0.5]), 0.0)] * 5 + [(np.array([0.25, 0.25, 0.25]), 1.0)] * 10
    rollout = Rollout(state, predictions, 14, TERMINATE_ACTION)
    terminal, mean = candidates_from_rollout(rollout, 1, (20, 20, 20))
    assert mean.box.size == (5, 5, 5) and mean.confidence == 1.0
    short = Rollout(state, predictions[:2], 1, TERMINATE_ACTION)
    assert candidates_from_rollout(short, 1, (20, 20, 20))[1].box.size == (10, 10, 10)


def test_candidate_sizes_are_clamped_into_the_volume():
    state = EpisodeState.start(BoundingBox.from_centre((2, 2, 2), (4, 4, 4)))
    rollout = Rollout(state, [(np.array([1.5, 0.0, 0.5]), 1.4)], 0, STEP_CAP)
    terminal, _ = candidates_from_rollout(rollout, 3, (20, 20, 20))
    assert terminal.box.size == (20, 1, 10)
    assert terminal.box.fits((20, 20, 20))
    assert terminal.confidence == 1.0


def test_localize_returns_six_candidates_inside_the_volume(small_phantom_config):
    scan = make_scans(1, small_phantom_config)[0]
    bundle = ModelBundle.create((4, 4, 4), (2, 2, 2), (8, 8, 8), seed=2)
    candidates = localize(scan.volume, bundle)
    assert [(c.arch_id, c.readout) for c in candidates] == [(a, r) for a in (1, 2, 3) for r in READOUTS]
    assert all(c.box.fits(scan.volume.dims) for c in candidates)
    assert all(0.0 <= c.confidence <= 1.0 for c in candidates)
    assert localize(scan.volume, bundle) == candidates


def test_localize_many_keeps_input_order():
    scans = make_scans(3)
    bundle = ModelBundle.create((4, 4, 4), (2, 2, 2), (8, 8, 8), seed=2)
    volumes = [s.volume for s in scans]
    serial = localize_many(volumes, bundle, threads=1)
    assert localize_many(volumes, bundle, threads=3) == serial


def test_localize_rejects_incomplete_bundle(constant_volume):
    bundle = ModelBundle.create((4, 4, 4), (2, 2, 2), (8, 8, 8))
    del bundle.networks[(2, "bbox")]
    with pytest.raises(InferenceError):
        localize(constant_volume, bundle)


def test_best_candidate_and_evaluate():
    truth = BoundingBox((0, 0, 0), (4, 4, 4))
    candidates = [
        Candidate(BoundingBox((10, 10, 10), (4, 4, 4)), 0.9, 1, TERMINAL),
        Candidate(truth, 0.5, 1, LAST10MEAN),
        Candidate(BoundingBox((2, 0, 0), (4, 4, 4)), 0.9, 2, TERMINAL),
    ]
    assert best_candidate(candidates) is candidates[0]
    assert oracle_best_candidate(candidates, truth) is candidates[1]

    annotation = Annotation("s", truth)
    assert not evaluate(candidates, annotation, (1, 1, 1)).detected
    assert evaluate(candidates[1], annotation, (1, 1, 1)).iou == 1.0
    assert evaluate(candidates[2].box, annotation, (1, 1, 1)).dice == 0.5


def test_candidates_json_roundtrip(tmp_path):
    candidates = [Candidate(BoundingBox((1, 2, 3), (4, 5, 6)), 0.1234567, 3, LAST10MEAN)]
    loaded = load_candidates(save_candidates(tmp_path / "c" / "scan.json", candidates))
    assert loaded[0].box == candidates[0].box
    assert loaded[0].confidence == 0.123457
    assert (loaded[0].arch_id, loaded[0].readout) == (3, LAST10MEAN)


def test_localize_never_consults_the_oracle(monkeypatch, small_phantom_config, tiny_train_config):
    calls = {"imitation_action": 0, "correct": 0}

    def counting(name, original):
        def wrapper(*args, **kwargs):
            calls[name] += 1
            return original(*args, **kwargs)
        return wrapper

    for name in calls:
        original = getattr(imitation_oracle, name)
        for module in (imitation_oracle, train_loop, nav_env, inference):
            if hasattr(module, name):
                monkeypatch.setattr(module, name, counting(name, original))

    scan = make_scans(1, small_phantom_config)[0]
    bundle = ModelBundle.create((4, 4, 4), (2, 2, 2), (8, 8, 8), seed=2)
    localize(scan.volume, bundle)
    assert calls == {"imitation_action": 0, "correct": 0}

    # the same counters do see the training-time episode collector
    target = nav_env.navigable_centre(scan.annotation.gt_box.centre_voxel, (8, 8, 8), scan.volume.dims)
    start = (20, 20, 20) if target[0] < 12 else (4, 4, 4)
    train_loop.collect_episode(scan, None, tiny_train_config, 1.0, start, (8, 8, 8), np.random.default_rng(0))
    assert calls["imitation_action"] > 0 and calls["correct"] > 0

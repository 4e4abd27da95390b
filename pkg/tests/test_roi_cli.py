import json

import pandas as pd
import pytest

import roi_cli
from crossval import AGGREGATE_COLUMNS, PER_SCAN_COLUMNS
from fusion import SWEEP_COLUMNS
from run_history import get_run_history

TINY_CONFIG = """\
PHANTOM_DIMS=24,24,24
PHANTOM_SPACING=1.0,1.0,2.0
PHANTOM_NOISE_SIGMA=10.0
PHANTOM_ORGAN_SEMI_AXES=3,5,3,5,2,4
PHANTOM_DISTRACTOR_SEMI_AXES=1,2
PHANTOM_DISTRACTOR_COUNT=2
TRAIN_CYCLES=1
TRAIN_STEPS_CAP=20
TRAIN_BATCH_SIZE=4
TRAIN_POLICY_CAPACITY=200
TRAIN_BBOX_CAPACITY=200
TRAIN_START_POINTS=centre
TRAIN_PATCH_SHAPE=4,4,4
TRAIN_CHANNEL_WIDTHS=2,2,2
INFER_STEP_CAP=10
SSL_MAX_ROUNDS=1
"""


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("ROI_LOC_RUN_DB", str(tmp_path / "runs.db"))
    monkeypatch.delenv("ROI_LOC_THREADS", raising=False)
    (tmp_path / "tiny.env").write_text(TINY_CONFIG, encoding="utf-8")
    return tmp_path


def run(*argv):
    return roi_cli.main([str(a) for a in argv])


def _gen(workspace, count):
    assert run("gen-data", "-c", "tiny.env", "-o", "ds", "--count", count, "--seed", 1) == 0
    return workspace / "ds"


def test_supervised_pipeline(workspace):
    ds = _gen(workspace, 4)
    assert len(json.loads((ds / "index.json").read_text())["entries"]) == 4

    assert run("train", "-c", "tiny.env", "-d", ds, "-o", "model") == 0
    assert (workspace / "model" / "bundle" / "bundle.json").exists()
    assert (workspace / "model" / "run_config.env").exists()

    assert run("localize", "-c", "tiny.env", "-d", ds, "-b", "model/bundle", "-o", "loc") == 0
    assert len(list((workspace / "loc" / "candidates").glob("*.json"))) == 4
    assert len(pd.read_csv(workspace / "loc" / "candidates.csv")) == 24
    assert len(pd.read_csv(workspace / "loc" / "best_metrics.csv")) == 4

    assert run("fuse", "-c", "tiny.env", "--candidates", "loc/candidates", "-d", ds, "-o", "fused") == 0
    assert len(pd.read_csv(workspace / "fused" / "fused.csv")) == 4
    assert len(pd.read_csv(workspace / "fused" / "fused_metrics.csv")) == 4

    assert run("sweep-offset", "--candidates", "loc/candidates", "-d", ds, "-o", "sweep",
               "--offsets", "0,33,45") == 0
    sweep = pd.read_csv(workspace / "sweep" / "sweep.csv")
    assert list(sweep.columns) == SWEEP_COLUMNS
    assert sweep["offset_percent"].tolist() == [0.0, 33.0, 45.0]

    assert [r["status"] for r in get_run_history()] == ["OK"] * 5
    assert list((workspace / "Log").glob("train_*.txt"))


def test_crossval_is_reproducible(workspace):
    ds = _gen(workspace, 4)
    assert run("crossval", "-c", "tiny.env", "-d", ds, "-k", 2, "-o", "cv_a") == 0
    assert run("crossval", "-c", "tiny.env", "-d", ds, "-k", 2, "-o", "cv_b") == 0
    a, b = workspace / "cv_a", workspace / "cv_b"
    assert (a / "per_scan.csv").read_text().splitlines()[0] == ",".join(PER_SCAN_COLUMNS)
    assert (a / "aggregate.csv").read_text().splitlines()[0] == ",".join(AGGREGATE_COLUMNS)
    for name in ("per_scan.csv", "aggregate.csv", "training_log.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_ssl_command(workspace):
    ds = _gen(workspace, 8)
    assert run("ssl", "-c", "tiny.env", "-d", ds, "-k", 2, "--ratio", "50:50", "-o", "ssl") == 0
    out = workspace / "ssl"
    assert (out / "fold_1" / "ledger.json").exists() and (out / "fold_2" / "ledger.json").exists()
    rounds = pd.read_csv(out / "rounds.csv")
    assert rounds.columns[0] == "fold"
    assert set(pd.read_csv(out / "summary.csv")["method"]) == {"best", "fused"}
    assert len(pd.read_csv(out / "per_scan.csv")) == 2 * 8
    assert "SSL_RATIO=50:50" in (out / "run_config.env").read_text()


def test_failure_leaves_no_output(workspace):
    assert run("train", "-d", "missing", "-o", "model") == 1
    assert not (workspace / "model").exists()

    ds = _gen(workspace, 4)
    assert run("crossval", "-c", "tiny.env", "-d", ds, "-k", 5, "-o", "cv") == 1
    assert not (workspace / "cv").exists()
    assert not list(workspace.glob(".cv.tmp-*"))

    statuses = [(r["command"], r["status"]) for r in get_run_history()]
    assert statuses[0] == ("crossval", "NOK") and ("gen-data", "OK") in statuses


def test_bad_config_key_fails(workspace):
    assert run("gen-data", "-o", "ds", "--set", "TRAIN_NOPE=1") == 1
    assert not (workspace / "ds").exists()


def test_history_command(workspace, capsys):
    _gen(workspace, 4)
    assert run("history", "--filter", "gen-data") == 0
    assert "gen-data" in capsys.readouterr().out


def test_traces_from_train_and_localize(workspace):
    ds = _gen(workspace, 4)
    assert run("train", "-c", "tiny.env", "-d", ds, "-o", "model", "--trace") == 0
    records = [json.loads(l) for l in (workspace / "model" / "traces" / "train.jsonl").read_text().splitlines()]
    assert records and all(r["episode"].startswith("cycle1/") for r in records)

    assert run("localize", "-c", "tiny.env", "-d", ds, "-b", "model/bundle", "-o", "loc", "--trace") == 0
    traces = sorted((workspace / "loc" / "traces").glob("*.jsonl"))
    assert len(traces) == 4
    records = [json.loads(l) for l in traces[0].read_text().splitlines()]
    assert {r["episode"] for r in records} <= {"arch1", "arch2", "arch3"}
    assert all(0.0 <= r["predicted_confidence"] <= 1.0 for r in records)
    assert len(pd.read_csv(workspace / "loc" / "candidates.csv")) == 24


def test_crossval_workbook_repeats_the_csv_reports(workspace):
    ds = _gen(workspace, 4)
    assert run("crossval", "-c", "tiny.env", "-d", ds, "-k", 2, "-o", "cv_a") == 0
    assert run("crossval", "-c", "tiny.env", "-d", ds, "-k", 2, "-o", "cv_b") == 0
    for sheet, csv in (("per_scan", "per_scan.csv"), ("aggregate", "aggregate.csv")):
        first = pd.read_excel(workspace / "cv_a" / "crossval_summary.xlsx", sheet_name=sheet, engine="openpyxl")
        second = pd.read_excel(workspace / "cv_b" / "crossval_summary.xlsx", sheet_name=sheet, engine="openpyxl")
        pd.testing.assert_frame_equal(first, second)
        pd.testing.assert_frame_equal(first, pd.read_csv(workspace / "cv_a" / csv),
                                      check_dtype=False, atol=1e-6)

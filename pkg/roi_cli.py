# =============================================================================
# roi_cli.py
#
# Command-line orchestrator for the ROI localisation toolkit.
# Subcommands: gen-data, train, localize, fuse, sweep-offset, ssl, crossval,
# history. Every run is tee'd to Log/<command>_<date>.txt, staged in a temp
# directory next to --out, promoted on success, and recorded in the run ledger.
# =============================================================================

import argparse
import logging
import os
import shutil
import sys
import traceback
from datetime import datetime
from pathlib import Path

import pandas as pd

from crossval import (BEST, FLOAT_FORMAT, FUSED, PER_SCAN_COLUMNS, CrossValidationProcessor,
                      summarize_folds)
from fusion import fuse, sweep_offset
from geometry_metrics import METRIC_COLUMNS
from inference import (best_candidate, evaluate, load_candidates, localize, localize_many,
                       save_candidates)
from nav_env import TraceWriter
from neural_core import ModelBundle
from run_config import (dump_run_config, load_run_config, log_level_from_env, parse_overrides,
                        threads_from_env)
from run_history import get_run_history, log_run
from ssl_driver import make_ssl_splits, save_ledger, self_train
from train_loop import run_training
from volume_store import load_index, load_scan, write_phantom_dataset

logger = logging.getLogger(__name__)

LOG_DIR = "Log"
DEFAULT_OFFSETS = "0,5,10,15,20,25,30,33,35,40,45"
CANDIDATE_COLUMNS = ["scan_id", "arch", "readout", "lower_x", "lower_y", "lower_z",
                     "size_x", "size_y", "size_z", "confidence"]
FUSED_COLUMNS = ["scan_id", "lower_x", "lower_y", "lower_z", "size_x", "size_y", "size_z"]
SSL_METHODS = [BEST, FUSED]


# =================================================================
# ========== LOGGER CLASS =========================================
# =================================================================

class Logger(object):
    """Tee stdout and stderr to both console and log file."""

    def __init__(self, filename, terminal):
        self.terminal = terminal
        self.log = open(filename, "a", encoding="utf-8")

    def write(self, message):
        self.terminal.write(message)
        self.log.write(message)
        self.log.flush()

    def flush(self, *args, **kwargs):
        self.terminal.flush()
        self.log.flush()

    def close(self):
        self.log.close()


def setup_logging(command):
    """Tee stdout/stderr into Log/<command>_<YYYY-MM-DD>.txt.

    Returns:
        (log path, restore callable)
    """
    os.makedirs(LOG_DIR, exist_ok=True)
    log_path = os.path.join(LOG_DIR, f"{command}_{datetime.now().strftime('%Y-%m-%d')}.txt")
    original_out, original_err = sys.stdout, sys.stderr
    tee = Logger(log_path, original_out)
    sys.stdout = tee
    sys.stderr = tee

    def restore():
        sys.stdout, sys.stderr = original_out, original_err
        tee.close()

    return log_path, restore


def banner(title):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60 + "\n")


# =================================================================
# ========== STAGED OUTPUT ========================================
# =================================================================

def staging_dir(out):
    """Empty temp directory next to `out`."""
    out = Path(out)
    stage = out.parent / f".{out.name}.tmp-{os.getpid()}"
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir(parents=True)
    return stage


def promote(stage, out):
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
    os.replace(stage, out)
    return out


# =================================================================
# ========== COMMANDS =============================================
# =================================================================

def _candidate_rows(scan_id, candidates):
    return [{"scan_id": scan_id, "arch": c.arch_id, "readout": c.readout,
             "lower_x": c.box.lower[0], "lower_y": c.box.lower[1], "lower_z": c.box.lower[2],
             "size_x": c.box.size[0], "size_y": c.box.size[1], "size_z": c.box.size[2],
             "confidence": c.confidence} for c in candidates]


def _load_candidate_dir(directory):
    directory = Path(directory)
    paths = sorted(directory.glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"❌ No candidate files in {directory}")
    return {p.stem: load_candidates(p) for p in paths}


def cmd_gen_data(args, config, stage):
    print(f"🧪 Generating {args.count:,} phantoms ({args.labelled_fraction:.0%} labelled)...")
    index = write_phantom_dataset(stage, config.phantom, args.count, args.labelled_fraction)
    return f"{len(index.entries)} phantoms, {len(index.labelled)} labelled"


def cmd_train(args, config, stage):
    index = load_index(args.dataset)
    scans = [load_scan(index, entry) for entry in index.labelled]
    print(f"📥 Loaded {len(scans):,} labelled scans")
    if args.trace:
        with TraceWriter(stage / "traces" / "train.jsonl") as trace:
            bundle, training_log = run_training(scans, config.train, config.oracle, trace=trace)
        print(f"🧭 Episode trace written to {trace.path.name}")
    else:
        bundle, training_log = run_training(scans, config.train, config.oracle)
    bundle.save(stage / "bundle")
    training_log.to_csv(stage / "training_log.csv", index=False, float_format=FLOAT_FORMAT)
    print(f"✅ Trained {len(training_log)} cycles, box size {bundle.box_size}")
    return f"{len(scans)} scans, {len(training_log)} cycles"


def cmd_localize(args, config, stage):
    index = load_index(args.dataset)
    bundle = ModelBundle.load(args.bundle)
    scans = [load_scan(index, entry) for entry in index.entries]
    print(f"🔍 Localising {len(scans):,} scans...")
    if args.trace:
        # one trace file per scan, rolled out serially
        results = []
        for scan in scans:
            with TraceWriter(stage / "traces" / f"{scan.scan_id}.jsonl") as trace:
                results.append(localize(scan.volume, bundle, config.infer, trace))
    else:
        results = localize_many([s.volume for s in scans], bundle, config.infer, threads_from_env())

    candidate_rows, metric_rows = [], []
    for scan, candidates in zip(scans, results):
        save_candidates(stage / "candidates" / f"{scan.scan_id}.json", candidates)
        candidate_rows.extend(_candidate_rows(scan.scan_id, candidates))
        if scan.annotation is not None:
            metric_rows.append(evaluate(best_candidate(candidates), scan.annotation,
                                        scan.volume.spacing).to_row())
    pd.DataFrame(candidate_rows, columns=CANDIDATE_COLUMNS).to_csv(
        stage / "candidates.csv", index=False, float_format=FLOAT_FORMAT)
    if metric_rows:
        pd.DataFrame(metric_rows, columns=METRIC_COLUMNS).to_csv(
            stage / "best_metrics.csv", index=False, float_format=FLOAT_FORMAT)
    return f"{len(scans)} scans localised"


def cmd_fuse(args, config, stage):
    candidate_sets = _load_candidate_dir(args.candidates)
    index = load_index(args.dataset) if args.dataset else None
    fused_rows, metric_rows = [], []
    for scan_id, candidates in candidate_sets.items():
        scan = load_scan(index, index.entry(scan_id)) if index else None
        box = fuse(candidates, config.fusion, scan.volume.dims if scan else None)
        fused_rows.append({"scan_id": scan_id,
                           "lower_x": box.lower[0], "lower_y": box.lower[1], "lower_z": box.lower[2],
                           "size_x": box.size[0], "size_y": box.size[1], "size_z": box.size[2]})
        if scan is not None and scan.annotation is not None:
            metric_rows.append(evaluate(box, scan.annotation, scan.volume.spacing).to_row())
    pd.DataFrame(fused_rows, columns=FUSED_COLUMNS).to_csv(stage / "fused.csv", index=False)
    if metric_rows:
        pd.DataFrame(metric_rows, columns=METRIC_COLUMNS).to_csv(
            stage / "fused_metrics.csv", index=False, float_format=FLOAT_FORMAT)
    print(f"✅ Fused {len(fused_rows):,} candidate sets at offset {config.fusion.offset_percent}%")
    return f"{len(fused_rows)} scans fused"


def cmd_sweep_offset(args, config, stage):
    candidate_sets = _load_candidate_dir(args.candidates)
    index = load_index(args.dataset)
    items = []
    for scan_id, candidates in candidate_sets.items():
        scan = load_scan(index, index.entry(scan_id))
        if scan.annotation is None:
            continue
        items.append((candidates, scan.annotation.gt_box, scan.volume.dims))
    if not items:
        raise ValueError("❌ sweep-offset needs at least one candidate set with a ground-truth box")
    offsets = [float(v) for v in args.offsets.split(",")]
    sweep = sweep_offset(items, offsets, config.fusion)
    sweep.to_csv(stage / "sweep.csv", index=False, float_format=FLOAT_FORMAT)
    best = sweep.loc[sweep["mean_iou"].idxmax()]
    print(f"✅ Best offset {best['offset_percent']:g}% (mean IOU {best['mean_iou']:.4f})")
    return f"{len(offsets)} offsets over {len(items)} scans"


def cmd_ssl(args, config, stage):
    index = load_index(args.dataset)
    annotated = [e for e in index.entries if e.annotation_path]
    splits = make_ssl_splits([e.scan_id for e in annotated], config.ssl.ratio, args.folds, config.ssl.seed)
    threads = threads_from_env()

    rows, round_frames = [], []
    for split in splits:
        banner(f"🔄 SSL FOLD {split.fold}/{len(splits)}")
        labelled = [load_scan(index, index.entry(s)) for s in split.train_labelled]
        unlabelled = [load_scan(index, index.entry(s), with_annotation=False) for s in split.train_unlabelled]
        print(f"   {len(labelled):,} labelled, {len(unlabelled):,} unlabelled, {len(split.test):,} test")
        result = self_train(labelled, unlabelled, config.train, config.ssl, config.fusion,
                            config.infer, config.oracle)

        fold_dir = stage / f"fold_{split.fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        save_ledger(fold_dir / "ledger.json", result.ledger)
        round_frames.append(result.rounds.assign(fold=split.fold))

        test = [load_scan(index, index.entry(s)) for s in split.test]
        results = localize_many([s.volume for s in test], result.bundle, config.infer, threads)
        for scan, candidates in zip(test, results):
            predictions = {BEST: best_candidate(candidates).box,
                           FUSED: fuse(candidates, config.fusion, scan.volume.dims)}
            for method in SSL_METHODS:
                report = evaluate(predictions[method], scan.annotation, scan.volume.spacing)
                rows.append({"fold": split.fold, "method": method, **report.to_row()})
        print(f"   ✅ best round {result.best_round}, {len(result.ledger)} pseudo-labels")

    per_scan = pd.DataFrame(rows, columns=PER_SCAN_COLUMNS)
    rounds = pd.concat(round_frames, ignore_index=True)
    rounds = rounds[["fold"] + [c for c in rounds.columns if c != "fold"]]
    per_scan.to_csv(stage / "per_scan.csv", index=False, float_format=FLOAT_FORMAT)
    rounds.to_csv(stage / "rounds.csv", index=False, float_format=FLOAT_FORMAT)
    summary = summarize_folds(per_scan, SSL_METHODS)
    summary.to_csv(stage / "summary.csv", index=False, float_format=FLOAT_FORMAT)
    fused = summary[summary["method"] == FUSED].iloc[0]
    print(f"✅ SSL fused DC {100 * fused['dice_mean']:.2f} ± {100 * fused['dice_sd']:.2f}")
    return f"{len(splits)} folds, ratio {config.ssl.ratio}"


def cmd_crossval(args, config, stage):
    processor = CrossValidationProcessor(load_index(args.dataset), config, args.folds, threads_from_env())
    processor.load_scans()
    processor.run_folds()
    summary = processor.aggregate()
    processor.save_reports(stage)
    for method in (BEST, FUSED):
        row = summary[summary["method"] == method].iloc[0]
        print(f"   {method:>6}: accuracy {100 * row['accuracy_mean']:.1f}%, "
              f"IOU {row['iou_mean']:.4f} ± {row['iou_sd']:.4f}")
    return f"{args.folds} folds over {len(processor.scans)} scans"


def cmd_history(args):
    runs = get_run_history(command=args.filter, limit=args.limit)
    if not runs:
        print("No runs recorded yet.")
    for run in runs:
        print(f"{run['id']:>5}  {run['run_timestamp']}  {run['status']:<3}  {run['command']:<12}  {run['details']}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "localize": cmd_localize,
    "fuse": cmd_fuse,
    "sweep-offset": cmd_sweep_offset,
    "ssl": cmd_ssl,
    "crossval": cmd_crossval,
}


# =================================================================
# ========== ARGUMENTS ============================================
# =================================================================

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="KEY=VALUE config file (see configs/desk.env).")
    common.add_argument("--seed", type=int, help="Overrides the seed of every config section.")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key, e.g. --set TRAIN_CYCLES=5. Repeatable.")
    common.add_argument("-o", "--out", required=True, help="Output directory (replaced on success).")

    parser = argparse.ArgumentParser(description="3D ROI localisation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Write a synthetic phantom dataset.")
    p.add_argument("--count", type=int, default=120)
    p.add_argument("--labelled-fraction", type=float, default=1.0)

    p = sub.add_parser("train", parents=[common], help="Train all six networks on labelled scans.")
    p.add_argument("-d", "--dataset", required=True)
    p.add_argument("--trace", action="store_true", help="Write a JSON-lines episode trace to traces/train.jsonl.")

    p = sub.add_parser("localize", parents=[common], help="Emit 6 candidates per scan.")
    p.add_argument("-d", "--dataset", required=True)
    p.add_argument("-b", "--bundle", required=True, help="Directory written by `train` (…/bundle).")
    p.add_argument("--trace", action="store_true", help="Write traces/<scan_id>.jsonl per scan (runs serially).")

    p = sub.add_parser("fuse", parents=[common], help="Fuse candidate dumps into one box per scan.")
    p.add_argument("--candidates", required=True, help="Directory of <scan_id>.json candidate dumps.")
    p.add_argument("-d", "--dataset", help="Dataset for clipping and evaluation.")

    p = sub.add_parser("sweep-offset", parents=[common], help="Mean fused IOU per offset.")
    p.add_argument("--candidates", required=True)
    p.add_argument("-d", "--dataset", required=True)
    p.add_argument("--offsets", default=DEFAULT_OFFSETS, help="Comma separated percents.")

    p = sub.add_parser("ssl", parents=[common], help="Self-training with k-fold evaluation.")
    p.add_argument("-d", "--dataset", required=True)
    p.add_argument("-k", "--folds", type=int, default=5)
    p.add_argument("--ratio", help="labelled:unlabelled split, e.g. 30:70.")

    p = sub.add_parser("crossval", parents=[common], help="Fully supervised k-fold cross-validation.")
    p.add_argument("-d", "--dataset", required=True)
    p.add_argument("-k", "--folds", type=int, default=5)

    p = sub.add_parser("history", help="List recorded runs.")
    p.add_argument("--filter", help="Only runs of this subcommand.")
    p.add_argument("--limit", type=int, default=20)
    return parser


def _check_paths(args):
    for name in ("dataset", "bundle", "candidates", "config"):
        value = getattr(args, name, None)
        if value and not Path(value).exists():
            raise FileNotFoundError(f"❌ --{name} path does not exist: {value}")
    if getattr(args, "folds", 2) < 2:
        raise ValueError(f"❌ --folds must be >= 2, got {args.folds}")


# =================================================================
# ========== MAIN SCRIPT ==========================================
# =================================================================

def main(argv=None):
    """Run one subcommand. Returns the process exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=log_level_from_env())
    if args.command == "history":
        return cmd_history(args)

    log_path, restore = setup_logging(args.command)
    arguments = {k: v for k, v in vars(args).items() if k != "command"}
    print(f"📝 Log file: {log_path}")
    print(f"🕒 Start Time: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")

    current_step = "Initialization"
    stage = None
    try:
        current_step = "Validate arguments"
        _check_paths(args)
        overrides = parse_overrides(args.set)
        if getattr(args, "ratio", None):
            overrides["SSL_RATIO"] = args.ratio

        current_step = "Load config"
        config = load_run_config(args.config, overrides, args.seed)

        current_step = f"Run {args.command}"
        banner(f"🚀 {args.command.upper()}")
        stage = staging_dir(args.out)
        details = COMMANDS[args.command](args, config, stage)
        (stage / "run_config.env").write_text(dump_run_config(config), encoding="utf-8")

        current_step = "Promote output"
        out = promote(stage, args.out)
        stage = None
        print(f"💾 Output: {out}")
        banner("🎉 COMPLETED!")
        log_run(args.command, arguments, "OK", details)
        return 0

    except Exception as e:
        print(f"\n❌ FAILED AT STEP: {current_step}")
        print(f"❌ Error details: {str(e)}")
        traceback.print_exc()
        try:
            log_run(args.command, arguments, "NOK", f"{current_step}: {e}")
        except Exception as db_error:
            print(f"⚠️ Could not record the run, reason: {db_error}")
        return 1

    finally:
        if stage is not None and Path(stage).exists():
            shutil.rmtree(stage, ignore_errors=True)
        restore()


if __name__ == "__main__":
    sys.exit(main())

"""
K-fold cross-validation of the fully supervised pipeline.

This module handles:
- Seeded assignment of the labelled scans to k folds
- Per fold: train on k-1 folds, localise + fuse on the held-out fold
- Per-scan metrics for the best candidate (max confidence), the fused box,
  the oracle-best candidate (max true IOU, label-dependent) and each of the
  6 individual candidates
- Aggregate mean ± SD across folds of fold-level means

Usage:
    from crossval import CrossValidationProcessor

    processor = CrossValidationProcessor(index, run_config, folds=3)
    processor.load_scans()
    processor.run_folds()
    processor.aggregate()
    processor.save_reports("out/crossval")
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from fusion import fuse
from inference import (READOUTS, Candidate, best_candidate, evaluate, localize_many,
                       oracle_best_candidate, save_candidates)
from neural_core import ARCH_IDS
from run_config import RunConfig
from train_loop import run_training
from volume_store import DatasetIndex, Scan, load_scan

log = logging.getLogger(__name__)

BEST = "best"
FUSED = "fused"
ORACLE_BEST = "oracle_best"
SOURCE_METHODS = [f"arch{a}_{r}" for a in ARCH_IDS for r in READOUTS]
METHODS = [BEST, FUSED, ORACLE_BEST] + SOURCE_METHODS

PER_SCAN_COLUMNS = ["fold", "scan_id", "method", "iou", "dice", "centroid_mm", "wall_mm", "detected"]
METRICS = ["accuracy", "iou", "dice", "wall_mm", "centroid_mm"]
AGGREGATE_COLUMNS = ["method", "n_scans"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "sd")]
FLOAT_FORMAT = "%.6f"


def summarize_folds(per_scan: pd.DataFrame, methods: Sequence[str]) -> pd.DataFrame:
    """Per method: mean and SD (ddof=1) across folds of the fold-level means.
    Accuracy is the fraction of detected scans."""
    df = per_scan.assign(accuracy=per_scan["detected"].astype(float))
    fold_means = df.groupby(["method", "fold"], sort=True)[METRICS].mean()
    rows = []
    for method in methods:
        if method not in fold_means.index.get_level_values(0):
            continue
        per_fold = fold_means.loc[method]
        row = {"method": method, "n_scans": int((df["method"] == method).sum())}
        for metric in METRICS:
            row[f"{metric}_mean"] = float(per_fold[metric].mean())
            row[f"{metric}_sd"] = float(per_fold[metric].std(ddof=1)) if len(per_fold) > 1 else 0.0
        rows.append(row)
    return pd.DataFrame(rows, columns=AGGREGATE_COLUMNS)


class CrossValidationProcessor:
    """Handle k-fold training and evaluation over a labelled dataset"""

    def __init__(self, index: DatasetIndex, run_config: RunConfig, folds: int = 5, threads: int = 1):
        """
        Args:
            index: Dataset index; only labelled entries take part
            run_config: Module configurations
            folds: Number of folds (>= 2)
            threads: Parallel localisation workers
        """
        self.index = index
        self.config = run_config
        self.folds = folds
        self.threads = threads
        self.scans: List[Scan] = []
        self.candidates: Dict[str, List[Candidate]] = {}
        self.training_logs: List[pd.DataFrame] = []
        self.per_scan: Optional[pd.DataFrame] = None
        self.summary: Optional[pd.DataFrame] = None

    def load_scans(self) -> List[Scan]:
        """
        Load every labelled scan with its annotation

        Raises:
            ValueError: fewer labelled scans than folds
        """
        print(f"\n📥 Loading labelled scans from {self.index.root}...")
        self.scans = [load_scan(self.index, entry) for entry in self.index.labelled]
        if self.folds < 2:
            raise ValueError(f"❌ fold count must be >= 2, got {self.folds}")
        if len(self.scans) < self.folds:
            raise ValueError(f"❌ {len(self.scans)} labelled scans is fewer than {self.folds} folds")
        print(f"   ✅ Loaded {len(self.scans):,} scans")
        return self.scans

    def make_folds(self) -> List[List[int]]:
        order = np.random.default_rng(self.config.train.seed).permutation(len(self.scans))
        return [list(fold) for fold in np.array_split(order, self.folds)]

    def run_folds(self) -> pd.DataFrame:
        """
        Train and evaluate every fold

        Returns:
            DataFrame with one row per (scan, method)
        """
        rows = []
        for k, test_idx in enumerate(self.make_folds(), start=1):
            print("\n" + "=" * 60)
            print(f"🔄 FOLD {k}/{self.folds}")
            print("=" * 60)
            held_out = set(test_idx)
            train_scans = [s for i, s in enumerate(self.scans) if i not in held_out]
            test_scans = [self.scans[i] for i in test_idx]
            print(f"   🏋️ Training on {len(train_scans):,} scans...")
            bundle, training_log = run_training(train_scans, self.config.train, self.config.oracle)
            training_log.insert(0, "fold", k)
            self.training_logs.append(training_log)

            print(f"   🔍 Localising {len(test_scans):,} held-out scans...")
            results = localize_many([s.volume for s in test_scans], bundle, self.config.infer, self.threads)
            for scan, candidates in zip(test_scans, results):
                self.candidates[scan.scan_id] = candidates
                rows.extend(self._scan_rows(k, scan, candidates))
            fold_rows = [r for r in rows if r["fold"] == k and r["method"] == FUSED]
            print(f"   ✅ Fold {k}: fused mean IOU {np.mean([r['iou'] for r in fold_rows]):.4f}")

        self.per_scan = pd.DataFrame(rows, columns=PER_SCAN_COLUMNS)
        return self.per_scan

    def _scan_rows(self, fold: int, scan: Scan, candidates: List[Candidate]) -> List[dict]:
        spacing = scan.volume.spacing
        gt = scan.annotation.gt_box
        predictions = {
            BEST: best_candidate(candidates).box,
            FUSED: fuse(candidates, self.config.fusion, scan.volume.dims),
            ORACLE_BEST: oracle_best_candidate(candidates, gt).box,
        }
        for c in candidates:
            predictions[f"arch{c.arch_id}_{c.readout}"] = c.box
        rows = []
        for method in METHODS:
            report = evaluate(predictions[method], scan.annotation, spacing)
            row = {"fold": fold, "method": method, **report.to_row()}
            rows.append(row)
        return rows

    def aggregate(self) -> pd.DataFrame:
        """
        Mean ± SD across folds of fold-level means, per method

        Returns:
            DataFrame with AGGREGATE_COLUMNS
        """
        if self.per_scan is None:
            raise ValueError("❌ run_folds must run before aggregate")
        self.summary = summarize_folds(self.per_scan, METHODS)
        return self.summary

    def save_reports(self, out_dir) -> Path:
        """Write per_scan.csv, aggregate.csv, training_log.csv, candidate dumps
        and crossval_summary.xlsx into out_dir.

        The CSV files are the reports and are byte-identical across reruns.
        crossval_summary.xlsx is a derived spreadsheet view of the same two tables:
        its cell values repeat but its bytes do not (openpyxl stamps the save time).
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.per_scan.to_csv(out / "per_scan.csv", index=False, float_format=FLOAT_FORMAT)
        self.summary.to_csv(out / "aggregate.csv", index=False, float_format=FLOAT_FORMAT)
        if self.training_logs:
            pd.concat(self.training_logs, ignore_index=True).to_csv(
                out / "training_log.csv", index=False, float_format=FLOAT_FORMAT)
        for scan_id, candidates in sorted(self.candidates.items()):
            save_candidates(out / "candidates" / f"{scan_id}.json", candidates)

        with pd.ExcelWriter(out / "crossval_summary.xlsx", engine="openpyxl") as writer:
            self.per_scan.to_excel(writer, sheet_name="per_scan", index=False)
            self.summary.to_excel(writer, sheet_name="aggregate", index=False)
        print(f"💾 Reports saved to {out}")
        return out

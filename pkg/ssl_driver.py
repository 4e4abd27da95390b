"""
Self-training: pre-train on the labelled pool, pseudo-label unlabelled scans
whose candidates are confident enough with the fused box, retrain, repeat.

Unlabelled scans are stripped of their annotations on entry, so nothing in
the loop can read hidden ground truth.

Usage:
    from ssl_driver import SslConfig, self_train

    result = self_train(labelled_scans, unlabelled_scans, train_config, SslConfig())
    result.rounds.to_csv("ssl_rounds.csv", index=False)
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from fusion import FusionConfig, fuse, strongest_architecture
from geometry_metrics import MetricReport, accuracy
from imitation_oracle import OracleConfig
from inference import Candidate, InferenceConfig, evaluate, localize
from neural_core import ModelBundle
from train_loop import TrainConfig, run_training
from volume_store import Annotation, BoundingBox, Scan, Volume

log = logging.getLogger(__name__)

ROUND_COLUMNS = ["round", "pool_size", "pseudo_labels", "val_accuracy", "val_iou", "val_dice"]

Trainer = Callable[[Sequence[Scan], Optional[ModelBundle]], ModelBundle]
Localizer = Callable[[Volume, ModelBundle], List[Candidate]]


class SslError(ValueError):
    """Raised on an empty labelled pool or an unusable split."""


@dataclass(frozen=True)
class SslConfig:
    pseudo_threshold: float = 1.2
    max_rounds: int = 5
    patience: int = 2
    min_improvement: float = 0.5
    validation_fraction: float = 0.2
    ratio: str = "30:70"
    warm_start: bool = True
    seed: int = 0

    def validate(self, fusion: FusionConfig = FusionConfig()):
        if self.pseudo_threshold < fusion.fuse_threshold:
            raise SslError(f"❌ pseudo_threshold {self.pseudo_threshold} below fuse_threshold {fusion.fuse_threshold}")
        if self.max_rounds < 1 or self.patience < 1:
            raise SslError("❌ max_rounds and patience must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise SslError(f"❌ validation_fraction must lie in [0, 1), got {self.validation_fraction}")
        labelled_fraction(self.ratio)


@dataclass(frozen=True)
class PseudoLabel:
    scan_id: str
    box: BoundingBox
    round: int
    arch_id: int
    confidence_sum: float

    def to_json(self) -> dict:
        return {"scan_id": self.scan_id, "lower": list(self.box.lower), "size": list(self.box.size),
                "round": self.round, "arch": self.arch_id, "confidence_sum": round(self.confidence_sum, 6)}


@dataclass
class SslFold:
    fold: int
    train_labelled: List[str]
    train_unlabelled: List[str]
    test: List[str]


@dataclass
class SslResult:
    bundle: ModelBundle
    ledger: List[PseudoLabel]
    rounds: pd.DataFrame
    best_round: int
    pool_ids: List[str] = field(default_factory=list)


class EarlyStopper:
    """Stops once `patience` consecutive scores fail to beat the best by more than min_improvement."""

    def __init__(self, patience: int, min_improvement: float):
        self.patience = patience
        self.min_improvement = min_improvement
        self.best_score: Optional[float] = None
        self.best_round: Optional[int] = None
        self.stale = 0

    def update(self, round_index: int, score: float) -> bool:
        if self.best_score is None or score > self.best_score + self.min_improvement:
            self.best_score, self.best_round, self.stale = score, round_index, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def labelled_fraction(ratio: str) -> float:
    try:
        labelled, unlabelled = (float(v) for v in str(ratio).split(":"))
    except ValueError:
        raise SslError(f"❌ ratio must look like '30:70', got {ratio!r}")
    if labelled <= 0 or unlabelled < 0:
        raise SslError(f"❌ ratio yields an empty labelled pool: {ratio}")
    return labelled / (labelled + unlabelled)


def make_ssl_splits(scan_ids: Sequence[str], ratio: str, folds: int, seed: int) -> List[SslFold]:
    """
    Labelled/unlabelled partition at `ratio`, each split into `folds` folds separately.
    Test fold k = labelled fold k + unlabelled fold k; training takes the remainder of both.

    Raises:
        SslError: fewer scans than folds, or no labelled scans
    """
    scan_ids = list(scan_ids)
    if folds < 2 or len(scan_ids) < folds:
        raise SslError(f"❌ need at least {max(folds, 2)} scans for {folds} folds, got {len(scan_ids)}")
    n_labelled = int(round(len(scan_ids) * labelled_fraction(ratio)))
    if n_labelled == 0:
        raise SslError(f"❌ ratio {ratio} yields an empty labelled pool for {len(scan_ids)} scans")

    order = np.random.default_rng(seed).permutation(len(scan_ids))
    labelled = [scan_ids[i] for i in order[:n_labelled]]
    unlabelled = [scan_ids[i] for i in order[n_labelled:]]
    lab_folds = [list(f) for f in np.array_split(np.array(labelled, dtype=object), folds)]
    unl_folds = [list(f) for f in np.array_split(np.array(unlabelled, dtype=object), folds)]

    splits = []
    for k in range(folds):
        splits.append(SslFold(
            fold=k + 1,
            train_labelled=[s for j, f in enumerate(lab_folds) if j != k for s in f],
            train_unlabelled=[s for j, f in enumerate(unl_folds) if j != k for s in f],
            test=lab_folds[k] + unl_folds[k],
        ))
    return splits


def _validate(bundle: ModelBundle, scans: Sequence[Scan], localizer: Localizer,
              fusion: FusionConfig) -> Tuple[float, float, float]:
    """(accuracy, mean iou, mean dice in percent points) of fused boxes on the validation scans."""
    if not scans:
        return float("nan"), float("nan"), float("nan")
    reports: List[MetricReport] = []
    for scan in scans:
        box = fuse(localizer(scan.volume, bundle), fusion, scan.volume.dims)
        reports.append(evaluate(box, scan.annotation, scan.volume.spacing))
    return (accuracy(reports), float(np.mean([r.iou for r in reports])),
            100.0 * float(np.mean([r.dice for r in reports])))


def self_train(labelled: Sequence[Scan], unlabelled: Sequence[Scan], train_config: TrainConfig,
               ssl_config: SslConfig = SslConfig(), fusion_config: FusionConfig = FusionConfig(),
               infer_config: InferenceConfig = InferenceConfig(), oracle: OracleConfig = OracleConfig(),
               trainer: Optional[Trainer] = None, localizer: Optional[Localizer] = None) -> SslResult:
    """
    Raises:
        SslError: empty labelled set
    """
    ssl_config.validate(fusion_config)
    if not labelled:
        raise SslError("❌ empty labelled set")
    if trainer is None:
        def trainer(pool, init):
            return run_training(pool, train_config, oracle, init_bundle=init)[0]
    if localizer is None:
        def localizer(volume, bundle):
            return localize(volume, bundle, infer_config)

    hidden = [scan.without_annotation() for scan in unlabelled]
    labelled = list(labelled)
    order = np.random.default_rng(ssl_config.seed).permutation(len(labelled))
    n_val = int(len(labelled) * ssl_config.validation_fraction)
    if len(labelled) - n_val < 2:
        n_val = 0
    validation = [labelled[i] for i in order[:n_val]]
    pool = [labelled[i] for i in order[n_val:]]
    log.info("Self-training: %d labelled (%d held out), %d unlabelled", len(pool), n_val, len(hidden))

    pretrained = trainer(pool, None)
    bundles: Dict[int, ModelBundle] = {0: pretrained}
    stopper = EarlyStopper(ssl_config.patience, ssl_config.min_improvement)
    acc, mean_iou, mean_dice = _validate(pretrained, validation, localizer, fusion_config)
    rows = [{"round": 0, "pool_size": len(pool), "pseudo_labels": 0,
             "val_accuracy": acc, "val_iou": mean_iou, "val_dice": mean_dice}]
    if validation:
        stopper.update(0, mean_dice)

    ledger: List[PseudoLabel] = []
    remaining = hidden
    current = pretrained
    for round_index in range(1, ssl_config.max_rounds + 1):
        promoted = []
        for scan in remaining:
            candidates = localizer(scan.volume, current)
            arch_id, total = strongest_architecture(candidates)
            if total >= ssl_config.pseudo_threshold:
                box = fuse(candidates, fusion_config, scan.volume.dims)
                ledger.append(PseudoLabel(scan.scan_id, box, round_index, arch_id, total))
                promoted.append(Scan(scan.scan_id, scan.volume, Annotation(scan.scan_id, box, "pseudo")))
        if not promoted:
            log.info("Round %d: no scan cleared the pseudo-label threshold, stopping", round_index)
            break

        promoted_ids = {s.scan_id for s in promoted}
        remaining = [s for s in remaining if s.scan_id not in promoted_ids]
        pool = pool + promoted
        current = trainer(pool, pretrained if ssl_config.warm_start else None)
        bundles[round_index] = current

        acc, mean_iou, mean_dice = _validate(current, validation, localizer, fusion_config)
        rows.append({"round": round_index, "pool_size": len(pool), "pseudo_labels": len(promoted),
                     "val_accuracy": acc, "val_iou": mean_iou, "val_dice": mean_dice})
        log.info("Round %d: +%d pseudo-labels, pool %d, val DC %.2f",
                 round_index, len(promoted), len(pool), mean_dice)
        if validation and stopper.update(round_index, mean_dice):
            log.info("Validation DC stalled for %d rounds, stopping", ssl_config.patience)
            break

    best_round = stopper.best_round if validation else max(bundles)
    return SslResult(bundle=bundles[best_round], ledger=ledger,
                     rounds=pd.DataFrame(rows, columns=ROUND_COLUMNS), best_round=best_round,
                     pool_ids=[s.scan_id for s in pool])


def save_ledger(path, ledger: Sequence[PseudoLabel]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([p.to_json() for p in ledger], indent=2), encoding="utf-8")
    return path

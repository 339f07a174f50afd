"""Cross-validated experiments: train, score held-out pairs, aggregate, localise."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data.cohort import Cohort, ImagePair, Outcome, TimeBin
from .data.images import ImageStore, to_model_input
from .data.sampling import FoldAssignment, split_folds
from .data.synth import SynthCohort
from .evaluation import BinnedReport, PredictionRecord, aggregate_records, bin_report
from .fusion import ModelConfig, PairClassifier
from .interpret import grad_cam, peak_in_box
from .persistence import load_checkpoint
from .training import TrainConfig, fit, fold_pairs, predict_units, set_threads, units_for

log = logging.getLogger(__name__)


def predict_pairs(model: PairClassifier, pairs: Sequence[ImagePair], store: ImageStore,
                  si_image: str = "later") -> np.ndarray:
    """LR probability per pair; the single-image model scores each distinct image once."""
    kind = model.cfg.kind
    units = units_for(pairs, kind, si_image)
    probs = predict_units(model, units, store, si_image)
    if kind != "si":
        return probs
    key = (lambda p: p.later_image) if si_image == "later" else (lambda p: p.ref_image)
    by_image = {key(u): float(pr) for u, pr in zip(units, probs)}
    return np.array([by_image[key(p)] for p in pairs], dtype=np.float64)


def write_folds(assignment: FoldAssignment, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient_id", "fold"))
        w.writerows(sorted(assignment.fold_of.items()))


@dataclass
class CvResult:
    records: list[PredictionRecord]
    report: BinnedReport
    models: dict[int, PairClassifier]
    val_pairs: dict[int, list[ImagePair]]
    val_probs: dict[int, np.ndarray]
    assignment: FoldAssignment


def crossval(
    cohort: Cohort,
    store: ImageStore,
    cfg: TrainConfig,
    model_cfg: ModelConfig = ModelConfig(),
    k: int = 3,
    how: str = "mean",
    out_dir: str | Path | None = None,
    folds: Iterable[int] | None = None,
) -> CvResult:
    """Train every fold, score its held-out patients and build the binned report."""
    results, assignment = fit(cohort, store, cfg, model_cfg, out_dir, folds)
    records, models, vpairs, vprobs = [], {}, {}, {}
    for res in results:
        _, val = fold_pairs(cohort, assignment, res.fold, cfg.task)
        probs = predict_pairs(res.model, val, store, cfg.si_image)
        records.extend(aggregate_records(val, probs, res.fold, k, how))
        models[res.fold], vpairs[res.fold], vprobs[res.fold] = res.model, val, probs
    if out_dir is not None:
        write_folds(assignment, Path(out_dir) / "folds.csv")
    report = bin_report(records, [r.fold for r in results])
    return CvResult(records, report, models, vpairs, vprobs, assignment)


def evaluate_checkpoints(
    cohort: Cohort,
    store: ImageStore,
    cfg: TrainConfig,
    run_dir: str | Path,
    model_cfg: ModelConfig | None = None,
    k: int = 3,
    how: str = "mean",
) -> list[PredictionRecord]:
    """Score every fold's held-out pairs with its stored checkpoint."""
    set_threads()
    assignment = split_folds(cohort, cfg.k_folds, cfg.seed)
    records = []
    for fold in range(cfg.k_folds):
        model, _ = load_checkpoint(Path(run_dir) / f"fold{fold}.ckpt", model_cfg)
        _, val = fold_pairs(cohort, assignment, fold, cfg.task)
        records.extend(aggregate_records(val, predict_pairs(model, val, store, cfg.si_image), fold, k, how))
    return records


# ---------------------------------------------------------------------------
# Localisation
# ---------------------------------------------------------------------------


@dataclass
class LocalizationCase:
    patient_id: str
    later_image: str
    prob: float
    hit: bool
    degenerate: bool


def cam_localization(
    cv: CvResult,
    synth: SynthCohort,
    store: ImageStore,
    bins: Sequence[TimeBin] = (TimeBin.M0,),
    batch: int = 32,
) -> list[LocalizationCase]:
    """Grad-CAM peak vs lesion box for correctly classified LR pairs with a visible lesion.

    Pairs are taken from held-out folds only; "correct" means the pair's own
    LR probability is at least 0.5.
    """
    cases = []
    for fold, pairs in cv.val_pairs.items():
        model, probs = cv.models[fold], cv.val_probs[fold]
        chosen = [
            (p, pr) for p, pr in zip(pairs, probs)
            if p.label is Outcome.LR and p.bin in bins and pr >= 0.5 and synth.lesion_bbox(p.later_image) is not None
        ]
        for i in range(0, len(chosen), batch):
            chunk = chosen[i : i + batch]
            later = torch.from_numpy(to_model_input(np.stack([store[p.later_image] for p, _ in chunk])))
            ref = None
            if model.cfg.kind != "si":
                ref = torch.from_numpy(to_model_input(np.stack([store[p.ref_image] for p, _ in chunk])))
            dt = torch.tensor([p.dt_norm for p, _ in chunk], dtype=torch.float32)
            maps = grad_cam(model, ref, later, dt)
            for (p, pr), hm in zip(chunk, maps):
                hw = store[p.later_image].shape[:2]
                hit = peak_in_box(hm, synth.lesion_bbox(p.later_image), hw)
                cases.append(LocalizationCase(p.patient_id, p.later_image, float(pr), hit, hm.degenerate))
    return cases


def with_ablation(cfg: TrainConfig, name: str) -> TrainConfig:
    if name == "full":
        return cfg
    if name not in ("no_dca", "no_dt", "no_balance", "no_augment"):
        raise ValueError(f"unknown ablation {name!r}")
    return replace(cfg, **{name: True})

"""Top-K aggregation, time-binned metrics, ROC AUC, patient-level voting and McNemar statistics.

LR is the positive class everywhere.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from statistics import mean, pstdev
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import chi2

from .data.cohort import ARTIFACT_TAGS, ImagePair, Outcome, TimeBin

THRESHOLD = 0.5
PREDICTIONS_HEADER = ("patient_id", "date_days", "bin", "fold", "prob", "truth", "tags")
BIN_ORDER = (TimeBin.M12_24, TimeBin.M6_12, TimeBin.M3_6, TimeBin.M0)
AGGREGATORS = ("mean", "max", "vote")


@dataclass
class PredictionRecord:
    patient_id: str
    date_days: int
    bin: TimeBin | None
    fold: int
    pair_probs: list[float]
    aggregated_prob: float
    truth: Outcome
    artifact_tags: frozenset[str] = frozenset()

    @property
    def predicted(self) -> Outcome:
        return Outcome.LR if self.aggregated_prob >= THRESHOLD else Outcome.CR

    @property
    def correct(self) -> bool:
        return self.predicted is self.truth


def topk_aggregate(probs: Sequence[float], k: int = 3, how: str = "mean") -> float:
    """Combine the ``k`` highest LR probabilities of a visit (all of them if fewer)."""
    if len(probs) == 0:
        raise ValueError("topk_aggregate: no probabilities")
    if k < 1:
        raise ValueError("topk_aggregate: K must be >= 1")
    top = sorted(probs, reverse=True)[: min(k, len(probs))]
    if how == "mean":
        # exact rational mean, rounded once
        return float(sum(map(Fraction, top)) / len(top))
    if how == "max":
        return top[0]
    if how == "vote":
        # fraction of the top-K that individually cross the threshold
        return sum(p >= THRESHOLD for p in top) / len(top)
    raise ValueError(f"unknown aggregation {how!r}; choose from {AGGREGATORS}")


@dataclass(frozen=True)
class Metrics:
    balanced_accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    n_pos: int = 0
    n_neg: int = 0


def _counts(records: Iterable[PredictionRecord]) -> tuple[int, int, int, int]:
    tp = fn = tn = fp = 0
    for r in records:
        if r.truth is Outcome.LR:
            if r.predicted is Outcome.LR:
                tp += 1
            else:
                fn += 1
        elif r.predicted is Outcome.CR:
            tn += 1
        else:
            fp += 1
    return tp, fn, tn, fp


def metrics_from_counts(tp: int, fn: int, tn: int, fp: int) -> Metrics:
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    bal = (sens + spec) / 2 if sens is not None and spec is not None else None
    return Metrics(bal, sens, spec, tp + fn, tn + fp)


def binary_metrics(records: Iterable[PredictionRecord]) -> Metrics:
    """Balanced accuracy, sensitivity, specificity; undefined parts are ``None``."""
    return metrics_from_counts(*_counts(records))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with mid-ranks for ties (``labels``: 1 = LR)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc: both classes are required")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def record_auc(records: Sequence[PredictionRecord]) -> float:
    return roc_auc([r.aggregated_prob for r in records], [r.truth.index for r in records])


def majority_vote(predictions: Sequence[Outcome]) -> Outcome:
    """Modal class; ties go to LR."""
    if not predictions:
        raise ValueError("majority_vote: no predictions")
    n_lr = sum(1 for p in predictions if Outcome(p) is Outcome.LR)
    return Outcome.LR if 2 * n_lr >= len(predictions) else Outcome.CR


@dataclass(frozen=True)
class ContingencyTable:
    """Patient-level agreement of model A and model B.

    ``a``: both correct, ``b``: A correct / B wrong, ``c``: A wrong / B correct, ``d``: both wrong.
    """

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ValueError("contingency counts must be non-negative")

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d


@dataclass(frozen=True)
class McNemarResult:
    p_value: float
    odds_ratio: float | None  # None when b + c == 0; inf when c == 0
    exact: bool
    b: int
    c: int


EXACT_LIMIT = 25


def mcnemar(t: ContingencyTable) -> McNemarResult:
    """Two-sided McNemar test; exact binomial below 25 discordant pairs, else chi-square with continuity correction."""
    b, c = t.b, t.c
    n = b + c
    if n == 0:
        return McNemarResult(1.0, None, True, b, c)
    odds = math.inf if c == 0 else b / c
    if n < EXACT_LIMIT:
        tail = Fraction(sum(math.comb(n, i) for i in range(min(b, c) + 1)), 2**n)
        p = float(min(Fraction(1), 2 * tail))
        return McNemarResult(p, odds, True, b, c)
    stat = (abs(b - c) - 1) ** 2 / n
    return McNemarResult(float(chi2.sf(stat, 1)), odds, False, b, c)


def contingency(a_correct: dict[str, bool], b_correct: dict[str, bool]) -> ContingencyTable:
    common = sorted(set(a_correct) & set(b_correct))
    if len(common) != len(a_correct) or len(common) != len(b_correct):
        raise ValueError("contingency: the two prediction sets cover different patients")
    counts = [0, 0, 0, 0]
    for pid in common:
        x, y = a_correct[pid], b_correct[pid]
        counts[(0 if x else 2) + (0 if y else 1)] += 1
    a, b_, c, d = counts[0], counts[1], counts[2], counts[3]
    return ContingencyTable(a, b_, c, d)


def patient_correctness(records: Iterable[PredictionRecord]) -> dict[str, bool]:
    """Majority vote of each patient's visit-level predictions, compared with the truth."""
    by_patient: dict[str, list[PredictionRecord]] = defaultdict(list)
    for r in records:
        by_patient[r.patient_id].append(r)
    out = {}
    for pid, recs in by_patient.items():
        out[pid] = majority_vote([r.predicted for r in recs]) is recs[0].truth
    return out


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


def aggregate_records(
    pairs: Sequence[ImagePair], probs: Sequence[float], fold: int, k: int = 3, how: str = "mean"
) -> list[PredictionRecord]:
    """Group pair probabilities by (patient, target study) and apply top-K."""
    if len(pairs) != len(probs):
        raise ValueError("aggregate_records: pairs and probabilities differ in length")
    groups: dict[tuple[str, int], list[int]] = {}
    for i, p in enumerate(pairs):
        groups.setdefault((p.patient_id, p.date_days), []).append(i)
    records = []
    for (pid, date), idx in groups.items():
        first = pairs[idx[0]]
        pp = [float(probs[i]) for i in idx]
        tags = frozenset().union(*(pairs[i].tags for i in idx))
        records.append(
            PredictionRecord(pid, date, first.bin, fold, pp, topk_aggregate(pp, k, how), first.label, tags)
        )
    return records


def reaggregate(records: Sequence[PredictionRecord], k: int, how: str = "mean") -> list[PredictionRecord]:
    return [
        PredictionRecord(r.patient_id, r.date_days, r.bin, r.fold, r.pair_probs, topk_aggregate(r.pair_probs, k, how),
                         r.truth, r.artifact_tags)
        for r in records
    ]


def write_predictions(records: Sequence[PredictionRecord], path: str | Path) -> None:
    """One row per pair probability; rows sharing (patient, date, fold) form one record."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTIONS_HEADER)
        for r in records:
            for p in r.pair_probs:
                w.writerow([r.patient_id, r.date_days, r.bin.value if r.bin else "", r.fold, f"{p:.8f}",
                            r.truth.value, "|".join(sorted(r.artifact_tags))])


def read_predictions(path: str | Path, k: int = 3, how: str = "mean") -> list[PredictionRecord]:
    groups: dict[tuple[str, int, int], dict] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PREDICTIONS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(PREDICTIONS_HEADER)}")
        for row in reader:
            key = (row["patient_id"], int(row["date_days"]), int(row["fold"]))
            g = groups.setdefault(
                key,
                {"bin": TimeBin(row["bin"]) if row["bin"] else None, "truth": Outcome(row["truth"]), "probs": [],
                 "tags": frozenset(t for t in row["tags"].split("|") if t)},
            )
            g["probs"].append(float(row["prob"]))
    return [
        PredictionRecord(pid, date, g["bin"], fold, g["probs"], topk_aggregate(g["probs"], k, how), g["truth"], g["tags"])
        for (pid, date, fold), g in groups.items()
    ]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    group: str  # "all" or an artifact tag
    bin: str  # TimeBin value or "ALL"
    fold: int | None  # None for the cross-fold summary
    metrics: Metrics
    sd: Metrics | None = None  # cross-fold standard deviations (summary rows only)
    n_folds: int = 1


@dataclass
class BinnedReport:
    rows: list[ReportRow] = field(default_factory=list)

    def summary(self, bin_name: str, group: str = "all") -> ReportRow | None:
        for r in self.rows:
            if r.fold is None and r.bin == bin_name and r.group == group:
                return r
        return None


def _mean_sd(values: list[float | None]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return mean(vals), pstdev(vals)


def _summarise(group: str, bin_name: str, per_fold: list[Metrics]) -> ReportRow:
    sens, sens_sd = _mean_sd([m.sensitivity for m in per_fold])
    spec, spec_sd = _mean_sd([m.specificity for m in per_fold])
    bal, bal_sd = _mean_sd([m.balanced_accuracy for m in per_fold])
    # keep the identity exact on summary rows: balanced accuracy from the mean components
    if sens is not None and spec is not None:
        bal = (sens + spec) / 2
    return ReportRow(
        group, bin_name, None,
        Metrics(bal, sens, spec, sum(m.n_pos for m in per_fold), sum(m.n_neg for m in per_fold)),
        Metrics(bal_sd, sens_sd, spec_sd), len(per_fold),
    )


def bin_report(records: Sequence[PredictionRecord], folds: Iterable[int] | None = None) -> BinnedReport:
    """Per (bin, fold) metrics, cross-fold mean/sd, and per-artifact-tag subgroup rows.

    An "ALL" bin pools every record regardless of bin.
    """
    fold_ids = sorted(set(folds) if folds is not None else {r.fold for r in records})
    report = BinnedReport()
    groups = [("all", lambda r: True)] + [(tag, lambda r, t=tag: t in r.artifact_tags) for tag in ARTIFACT_TAGS]
    bins = [(b.value, lambda r, b=b: r.bin is b) for b in BIN_ORDER] + [("ALL", lambda r: True)]
    for gname, gsel in groups:
        for bname, bsel in bins:
            sel = [r for r in records if gsel(r) and bsel(r)]
            if not sel:
                continue
            per_fold = []
            for f in fold_ids:
                m = binary_metrics(r for r in sel if r.fold == f)
                if m.n_pos + m.n_neg == 0:
                    continue
                per_fold.append(m)
                report.rows.append(ReportRow(gname, bname, f, m))
            report.rows.append(_summarise(gname, bname, per_fold))
    return report


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


REPORT_HEADER = ("group", "bin", "fold", "balanced_accuracy", "sensitivity", "specificity",
                 "balanced_accuracy_sd", "sensitivity_sd", "specificity_sd", "n_lr", "n_cr")


def write_report(report: BinnedReport, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.rows:
            sd = r.sd or Metrics(None, None, None)
            w.writerow([r.group, r.bin, "mean" if r.fold is None else r.fold,
                        _fmt(r.metrics.balanced_accuracy), _fmt(r.metrics.sensitivity), _fmt(r.metrics.specificity),
                        _fmt(sd.balanced_accuracy), _fmt(sd.sensitivity), _fmt(sd.specificity),
                        r.metrics.n_pos, r.metrics.n_neg])


def format_report(report: BinnedReport, group: str = "all") -> str:
    """Aligned text table of the cross-fold summary rows."""

    def cell(m: float | None, s: float | None) -> str:
        if m is None:
            return "-"
        return f"{100 * m:5.1f} ± {100 * (s or 0):4.1f}"

    lines = [f"{'bin':<8}{'bal. acc':>16}{'sensitivity':>16}{'specificity':>16}{'n_LR':>7}{'n_CR':>7}"]
    for r in report.rows:
        if r.fold is not None or r.group != group:
            continue
        sd = r.sd or Metrics(None, None, None)
        lines.append(
            f"{r.bin:<8}{cell(r.metrics.balanced_accuracy, sd.balanced_accuracy):>16}"
            f"{cell(r.metrics.sensitivity, sd.sensitivity):>16}{cell(r.metrics.specificity, sd.specificity):>16}"
            f"{r.metrics.n_pos:>7}{r.metrics.n_neg:>7}"
        )
    return "\n".join(lines)

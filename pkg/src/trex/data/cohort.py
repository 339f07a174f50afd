"""Longitudinal cohort model, manifest I/O, label propagation and pair construction."""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

DAYS_PER_MONTH = 30.4375
DT_SPAN_DAYS = 730
MANIFEST_HEADER = ("patient_id", "outcome", "study_kind", "date_days", "image_path", "artifact_tags")
ARTIFACT_TAGS = ("blood", "stool", "telangiectasia", "poor_quality")


class Outcome(str, enum.Enum):
    CR = "CR"
    LR = "LR"

    @property
    def index(self) -> int:
        return 1 if self is Outcome.LR else 0


class StudyKind(str, enum.Enum):
    PRE_TNT = "pre_tnt"
    RESTAGING = "restaging"
    FOLLOW_UP = "follow_up"


class Task(str, enum.Enum):
    SURVEILLANCE = "surveillance"
    RESPONSE = "response"


class TimeBin(str, enum.Enum):
    M0 = "M0"
    M3_6 = "M3_6"
    M6_12 = "M6_12"
    M12_24 = "M12_24"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRef:
    path: str
    tags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Study:
    kind: StudyKind
    date_days: int
    images: tuple[ImageRef, ...]
    label: Outcome | None = None

    @property
    def artifact_tags(self) -> frozenset[str]:
        tags: frozenset[str] = frozenset()
        for im in self.images:
            tags |= im.tags
        return tags


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    outcome: Outcome
    studies: tuple[Study, ...]

    def __post_init__(self):
        kinds = [s.kind for s in self.studies]
        for kind in (StudyKind.PRE_TNT, StudyKind.RESTAGING):
            if kinds.count(kind) > 1:
                raise ManifestError(f"patient {self.patient_id}: more than one {kind.value} study")
        dates = [s.date_days for s in self.studies]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ManifestError(f"patient {self.patient_id}: studies not strictly ordered by date {dates}")
        for s in self.studies:
            if s.kind is StudyKind.RESTAGING and s.date_days != 0:
                raise ManifestError(f"patient {self.patient_id}: restaging study must have date_days 0")
            if s.kind is StudyKind.FOLLOW_UP and s.date_days <= 0:
                raise ManifestError(f"patient {self.patient_id}: follow-up with non-positive date {s.date_days}")

    def study(self, kind: StudyKind) -> Study | None:
        return next((s for s in self.studies if s.kind is kind), None)

    @property
    def last_date(self) -> int:
        return self.studies[-1].date_days


@dataclass(frozen=True)
class Cohort:
    patients: tuple[PatientRecord, ...] = ()

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def by_id(self) -> dict[str, PatientRecord]:
        return {p.patient_id: p for p in self.patients}

    def subset(self, ids: Iterable[str]) -> "Cohort":
        keep = set(ids)
        return Cohort(tuple(p for p in self.patients if p.patient_id in keep))

    def image_paths(self) -> list[str]:
        return [im.path for p in self.patients for s in p.studies for im in s.images]


@dataclass(frozen=True)
class ImagePair:
    ref_image: str
    later_image: str
    dt_norm: float
    label: Outcome
    task: Task
    patient_id: str
    bin: TimeBin | None
    date_days: int  # date of the later (target) study
    tags: frozenset[str] = field(default=frozenset())  # artifacts of the later image


# ---------------------------------------------------------------------------
# Time handling
# ---------------------------------------------------------------------------


def normalize_dt(delta_days: int) -> float:
    """Days between acquisitions mapped onto [0, 1] over two years (clamped)."""
    if delta_days < 0:
        raise ValueError(f"normalize_dt: negative interval {delta_days}")
    return min(delta_days / DT_SPAN_DAYS, 1.0)


def bin_timepoint(days_before_last: int) -> TimeBin | None:
    """Time bin of a visit relative to the last visit; ``None`` means excluded (> 24 months)."""
    if days_before_last < 0:
        raise ValueError(f"bin_timepoint: negative offset {days_before_last}")
    if days_before_last == 0:
        return TimeBin.M0
    months = days_before_last / DAYS_PER_MONTH
    if months <= 6:
        return TimeBin.M3_6
    if months <= 12:
        return TimeBin.M6_12
    if months <= 24:
        return TimeBin.M12_24
    return None


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def _parse_tags(text: str, lineno: int) -> frozenset[str]:
    tags = frozenset(t for t in text.split("|") if t)
    unknown = tags - set(ARTIFACT_TAGS)
    if unknown:
        raise ManifestError(f"line {lineno}: unknown artifact tag(s) {sorted(unknown)}")
    return tags


def load_manifest(path: str | Path) -> Cohort:
    """Parse a manifest CSV into a validated :class:`Cohort`."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    rows: dict[str, dict] = {}
    order: list[str] = []
    seen_images: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return Cohort()
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"line 1: expected header {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"line {lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            pid, outcome, kind, date, image, tags = (c.strip() for c in row)
            if not pid:
                raise ManifestError(f"line {lineno}: empty patient_id")
            if not outcome:
                raise ManifestError(f"line {lineno}: outcome label missing for patient {pid}")
            try:
                outcome_v = Outcome(outcome)
            except ValueError:
                raise ManifestError(f"line {lineno}: unknown outcome {outcome!r}") from None
            try:
                kind_v = StudyKind(kind)
            except ValueError:
                raise ManifestError(f"line {lineno}: unknown study kind {kind!r}") from None
            try:
                date_v = int(date)
            except ValueError:
                raise ManifestError(f"line {lineno}: date_days {date!r} is not an integer") from None
            if not image:
                raise ManifestError(f"line {lineno}: empty image_path")
            if image in seen_images:
                raise ManifestError(f"line {lineno}: duplicate image {image!r}")
            seen_images.add(image)
            rec = rows.get(pid)
            if rec is None:
                rec = rows[pid] = {"outcome": outcome_v, "studies": {}}
                order.append(pid)
            elif rec["outcome"] is not outcome_v:
                raise ManifestError(f"line {lineno}: conflicting outcome for patient {pid}")
            key = (kind_v, date_v)
            rec["studies"].setdefault(key, []).append(ImageRef(image, _parse_tags(tags, lineno)))
    patients = []
    for pid in order:
        rec = rows[pid]
        studies = tuple(
            Study(kind, date, tuple(images))
            for (kind, date), images in sorted(rec["studies"].items(), key=lambda kv: kv[0][1])
        )
        try:
            patients.append(PatientRecord(pid, rec["outcome"], studies))
        except ManifestError as err:
            raise ManifestError(f"{path}: {err}") from None
    return Cohort(tuple(patients))


def write_manifest(cohort: Cohort, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for p in cohort:
            for s in p.studies:
                for im in s.images:
                    w.writerow([p.patient_id, p.outcome.value, s.kind.value, s.date_days, im.path, "|".join(sorted(im.tags))])


# ---------------------------------------------------------------------------
# Labels and pairs
# ---------------------------------------------------------------------------


def assign_retrospective_labels(cohort: Cohort) -> Cohort:
    """Every study inherits the outcome known at the patient's last follow-up."""
    return Cohort(
        tuple(replace(p, studies=tuple(replace(s, label=p.outcome) for s in p.studies)) for p in cohort.patients)
    )


def build_pairs(cohort: Cohort, task: Task | str) -> list[ImagePair]:
    """Cartesian product of reference-study images with each target study's images.

    Surveillance pairs restaging with every follow-up inside the 24-month
    window; response pairs pre-TNT with restaging.  Patients lacking the
    reference study are skipped with a warning.
    """
    task = Task(task)
    ref_kind = StudyKind.RESTAGING if task is Task.SURVEILLANCE else StudyKind.PRE_TNT
    pairs: list[ImagePair] = []
    for p in cohort:
        ref = p.study(ref_kind)
        if ref is None or not ref.images:
            log.warning("patient %s has no %s study; skipped for %s pairs", p.patient_id, ref_kind.value, task.value)
            continue
        if task is Task.SURVEILLANCE:
            targets = [s for s in p.studies if s.kind is StudyKind.FOLLOW_UP]
        else:
            restaging = p.study(StudyKind.RESTAGING)
            if restaging is None:
                log.warning("patient %s has no restaging study; skipped for response pairs", p.patient_id)
                continue
            targets = [restaging]
        for target in targets:
            tbin = bin_timepoint(p.last_date - target.date_days)
            if task is Task.SURVEILLANCE and tbin is None:
                continue
            dt = normalize_dt(target.date_days - ref.date_days)
            label = target.label or p.outcome
            for a in ref.images:
                for b in target.images:
                    pairs.append(ImagePair(a.path, b.path, dt, label, task, p.patient_id, tbin, target.date_days, b.tags))
    return pairs

"""Procedural longitudinal endoscopy cohort with known ground truth.

Each patient gets a mucosa appearance (base colour, fold texture, a pale
treatment scar and a few dark pigment specks) that persists across visits
while the viewpoint (shift, rotation, brightness) changes per image.  LR
patients grow a dark lesion: invisible until a few visits before detection,
sub-threshold (radius <= 2 px, the same size and colour as a speck) in the
visits just before detection, and clearly visible at the last visit.  Once
present, the lesion also reddens the whole mucosa slightly.  Because
specks already exist and base colours vary widely between patients, an
early lesion is mainly recognisable by comparing with the restaging image.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .cohort import (
    ARTIFACT_TAGS,
    Cohort,
    ImageRef,
    Outcome,
    PatientRecord,
    Study,
    StudyKind,
    write_manifest,
)
from .images import write_image

SPECK_COLOR = np.array([0.33, 0.10, 0.20])
LESION_COLOR = SPECK_COLOR
SCAR_COLOR = np.array([0.93, 0.86, 0.84])
STOOL_COLOR = np.array([0.58, 0.43, 0.14])
BLOOD_COLOR = np.array([0.80, 0.04, 0.04])
VESSEL_COLOR = np.array([0.62, 0.08, 0.16])


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 200
    lr_rate: float = 0.4
    size: int = 64
    visit_interval_days: int = 90
    interval_jitter_days: int = 10
    followups: tuple[int, int] = (5, 7)  # inclusive range of follow-up visits
    restaging_images: tuple[int, int] = (1, 2)
    followup_images: tuple[int, int] = (1, 3)
    detection_images: tuple[int, int] = (2, 4)  # images at the visit where a lesion is visible
    pre_tnt: bool = True
    specks: tuple[int, int] = (0, 2)
    speck_radius: tuple[float, float] = (1.5, 2.0)
    subthreshold_visits: tuple[int, int] = (2, 3)  # visits with a tiny lesion before detection
    detect_threshold: float = 4.0
    detect_radius: tuple[float, float] = (6.0, 9.0)
    max_shift: float = 6.0
    color_spread: float = 0.12  # per-patient base colour jitter (per channel)
    # diffuse mucosal reddening once the lesion exists (fraction of G/B removed):
    # (sub-threshold visits, detection visit)
    tint: tuple[float, float] = (0.07, 0.15)
    response_signal: float = 1.5  # extra pre-TNT tumour radius for LR patients
    stool_rate: float = 0.08
    blood_rate: float = 0.08
    telangiectasia_rate: float = 0.08
    poor_quality_rate: float = 0.08

    def __post_init__(self):
        for name in ("followups", "restaging_images", "followup_images", "detection_images", "specks", "speck_radius",
                     "subthreshold_visits", "detect_radius", "tint"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        rates = {k: getattr(self, k) for k in ("lr_rate", "stool_rate", "blood_rate", "telangiectasia_rate",
                                                "poor_quality_rate")}
        for k, v in rates.items():
            if not 0.0 <= v <= 1.0:
                raise SynthConfigError(f"{k}={v} is not a probability")
        if self.n_patients < 0:
            raise SynthConfigError("n_patients must be non-negative")
        if self.size < 16:
            raise SynthConfigError("size must be at least 16 px")
        for name in ("followups", "restaging_images", "followup_images", "detection_images", "specks",
                     "subthreshold_visits"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise SynthConfigError(f"{name} range {lo}..{hi} is invalid")
        if min(self.followup_images[0], self.restaging_images[0], self.detection_images[0]) < 1:
            raise SynthConfigError("every study needs at least one image")
        if self.followups[0] < self.subthreshold_visits[1] + 1:
            raise SynthConfigError("too few follow-ups to host the sub-threshold visits")
        if self.speck_radius[1] > 2.0:
            raise SynthConfigError("speck radius must stay sub-threshold (<= 2 px)")
        if self.detect_radius[0] < self.detect_threshold:
            raise SynthConfigError("detect_radius must start at or above detect_threshold")
        if not all(0.0 <= t < 1.0 for t in self.tint):
            raise SynthConfigError("tint values must lie in [0, 1)")
        if self.visit_interval_days <= self.interval_jitter_days:
            raise SynthConfigError("visit interval must exceed its jitter")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageTruth:
    patient_id: str
    study_kind: str
    date_days: int
    lesion_radius: float
    lesion_center: tuple[float, float] | None  # (row, col) in pixels
    tags: tuple[str, ...]


@dataclass
class SynthCohort:
    cohort: Cohort
    images: dict[str, np.ndarray]
    truth: dict[str, ImageTruth] = field(default_factory=dict)
    onset_days: dict[str, int | None] = field(default_factory=dict)

    def lesion_bbox(self, path: str) -> tuple[int, int, int, int] | None:
        """``(r0, c0, r1, c1)`` inclusive pixel bounds of the lesion, or ``None``."""
        t = self.truth[path]
        if t.lesion_center is None or t.lesion_radius <= 0:
            return None
        r, c = t.lesion_center
        rad = t.lesion_radius
        size = self.images[path].shape[0]
        return (
            max(0, int(math.floor(r - rad))),
            max(0, int(math.floor(c - rad))),
            min(size - 1, int(math.ceil(r + rad))),
            min(size - 1, int(math.ceil(c + rad))),
        )


# ---------------------------------------------------------------------------
# Rendering primitives (float images in [0, 1])
# ---------------------------------------------------------------------------


def _blend(img: np.ndarray, alpha: np.ndarray, color: np.ndarray) -> None:
    img *= 1.0 - alpha[..., None]
    img += alpha[..., None] * color


def _disc(yy, xx, cy, cx, r, soft: float = 0.6) -> np.ndarray:
    d = np.hypot(yy - cy, xx - cx)
    return np.clip((r - d) / soft + 0.5, 0.0, 1.0)


def _segment(yy, xx, p0, p1, width: float) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    v = p1 - p0
    t = np.clip(((yy - p0[0]) * v[0] + (xx - p0[1]) * v[1]) / max(v @ v, 1e-9), 0.0, 1.0)
    d = np.hypot(yy - (p0[0] + t * v[0]), xx - (p0[1] + t * v[1]))
    return np.clip((width - d) / 0.5 + 0.5, 0.0, 1.0)


@dataclass
class _Patient:
    base: np.ndarray
    folds: list[tuple[float, float, float]]  # (frequency, orientation, phase)
    scar_axes: tuple[float, float]
    scar_angle: float
    specks: list[tuple[float, float, float]]  # (angle, distance, radius) around the site
    lesion_polar: tuple[float, float]


def _new_patient(cfg: SynthConfig, rng: np.random.Generator) -> _Patient:
    base = np.array([0.78, 0.42, 0.40]) + rng.uniform(-cfg.color_spread, cfg.color_spread, size=3)
    folds = [(rng.uniform(0.08, 0.2), rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi)) for _ in range(3)]
    n_specks = int(rng.integers(cfg.specks[0], cfg.specks[1] + 1))
    specks = [
        (rng.uniform(0, 2 * math.pi), rng.uniform(4.0, 12.0), rng.uniform(*cfg.speck_radius)) for _ in range(n_specks)
    ]
    return _Patient(
        base=base,
        folds=folds,
        scar_axes=(rng.uniform(1.0, 1.5), rng.uniform(0.7, 1.0)),
        scar_angle=rng.uniform(0, math.pi),
        specks=specks,
        lesion_polar=(rng.uniform(0, 2 * math.pi), rng.uniform(4.0, 12.0)),
    )


def _render(
    cfg: SynthConfig,
    pat: _Patient,
    rng: np.random.Generator,
    scar_radius: float,
    lesion_radius: float,
    tags: set[str],
    pre_tnt_tumor: float = 0.0,
) -> tuple[np.ndarray, tuple[float, float] | None]:
    s = cfg.size
    scale = s / 64.0
    yy, xx = np.mgrid[0:s, 0:s].astype(float) + 0.5
    theta = rng.uniform(0, 2 * math.pi)
    cy, cx = s / 2 + rng.uniform(-cfg.max_shift, cfg.max_shift) * scale, s / 2 + rng.uniform(-cfg.max_shift, cfg.max_shift) * scale
    ct, st = math.cos(theta), math.sin(theta)
    # site-centred rotated coordinates
    uy = (yy - cy) * ct - (xx - cx) * st
    ux = (yy - cy) * st + (xx - cx) * ct

    img = np.empty((s, s, 3))
    img[:] = pat.base * rng.uniform(0.9, 1.1)
    tex = sum(np.sin(f / scale * (uy * math.cos(o) + ux * math.sin(o)) + ph) for f, o, ph in pat.folds)
    img *= (1.0 + 0.06 * tex)[..., None]
    img += rng.normal(0.0, 0.015, size=img.shape)

    def at(angle: float, dist: float) -> tuple[float, float]:
        a = angle + theta
        return cy + dist * scale * math.sin(a), cx + dist * scale * math.cos(a)

    if pre_tnt_tumor > 0:
        _blend(img, 0.9 * _disc(yy, xx, cy, cx, pre_tnt_tumor * scale, soft=1.5), LESION_COLOR * 1.2)
    if scar_radius > 0:
        a, b = pat.scar_axes
        ca, sa = math.cos(pat.scar_angle), math.sin(pat.scar_angle)
        ey, ex = uy * ca - ux * sa, uy * sa + ux * ca
        d = np.hypot(ey / a, ex / b)
        _blend(img, 0.65 * np.clip((scar_radius * scale - d) / 1.5 + 0.5, 0, 1), SCAR_COLOR)
    for ang, dist, rad in pat.specks:
        py, px = at(ang, dist)
        _blend(img, 0.9 * _disc(yy, xx, py, px, rad * scale), SPECK_COLOR)
    if "telangiectasia" in tags:
        for _ in range(int(rng.integers(3, 6))):
            p0 = at(rng.uniform(0, 2 * math.pi), rng.uniform(0, 10))
            p1 = (p0[0] + rng.uniform(-8, 8) * scale, p0[1] + rng.uniform(-8, 8) * scale)
            _blend(img, 0.8 * _segment(yy, xx, p0, p1, 0.45 * scale), VESSEL_COLOR)
    center = None
    if lesion_radius > 0:
        center = at(*pat.lesion_polar)
        # hue shift smaller than the spread of base colours between patients
        img[..., 1:] *= 1.0 - cfg.tint[lesion_radius >= cfg.detect_threshold]
        _blend(img, 0.9 * _disc(yy, xx, center[0], center[1], lesion_radius * scale), LESION_COLOR)
    if "blood" in tags:
        for _ in range(int(rng.integers(1, 3))):
            p0 = (rng.uniform(0, s), rng.uniform(0, s))
            p1 = (p0[0] + rng.uniform(-20, 20) * scale, p0[1] + rng.uniform(-20, 20) * scale)
            _blend(img, 0.85 * _segment(yy, xx, p0, p1, 1.0 * scale), BLOOD_COLOR)
    if "stool" in tags:
        for _ in range(int(rng.integers(1, 4))):
            _blend(
                img,
                0.95 * _disc(yy, xx, rng.uniform(0, s), rng.uniform(0, s), rng.uniform(3, 6) * scale, soft=1.5),
                STOOL_COLOR,
            )
    # endoscope field of view
    r = np.hypot(yy - s / 2, xx - s / 2)
    img *= np.clip((0.55 * s - r) / (0.08 * s), 0.15, 1.0)[..., None]
    if "poor_quality" in tags:
        img = gaussian_filter(img, sigma=(1.6 * scale, 1.6 * scale, 0)) * 0.85
    out = np.clip(np.rint(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)
    return out, center


def _draw_tags(cfg: SynthConfig, rng: np.random.Generator) -> set[str]:
    rates = (cfg.blood_rate, cfg.stool_rate, cfg.telangiectasia_rate, cfg.poor_quality_rate)
    return {tag for tag, p in zip(ARTIFACT_TAGS, rates) if rng.random() < p}


def _lesion_schedule(cfg: SynthConfig, n_followups: int, rng: np.random.Generator) -> list[float]:
    """Lesion radius at each follow-up (index 0 is the first follow-up)."""
    radii = [0.0] * n_followups
    radii[-1] = rng.uniform(*cfg.detect_radius)
    n_sub = int(rng.integers(cfg.subthreshold_visits[0], cfg.subthreshold_visits[1] + 1))
    for j in range(1, n_sub + 1):
        # grows towards 2 px just before detection
        radii[-1 - j] = max(1.0, 2.0 - 0.4 * (j - 1) - rng.uniform(0, 0.2))
    return radii


def synth_cohort(cfg: SynthConfig = SynthConfig(), seed: int = 0) -> SynthCohort:
    """Generate patients, studies and rendered images deterministically from ``seed``."""
    cfg.validate()
    images: dict[str, np.ndarray] = {}
    truth: dict[str, ImageTruth] = {}
    onset: dict[str, int | None] = {}
    patients = []
    width = max(3, len(str(cfg.n_patients)))
    for i in range(cfg.n_patients):
        rng = np.random.default_rng([seed, i])
        pid = f"P{i:0{width}d}"
        outcome = Outcome.LR if rng.random() < cfg.lr_rate else Outcome.CR
        pat = _new_patient(cfg, rng)
        n_fu = int(rng.integers(cfg.followups[0], cfg.followups[1] + 1))
        dates, d = [], 0
        for _ in range(n_fu):
            d += cfg.visit_interval_days + int(rng.integers(-cfg.interval_jitter_days, cfg.interval_jitter_days + 1))
            dates.append(d)
        radii = _lesion_schedule(cfg, n_fu, rng) if outcome is Outcome.LR else [0.0] * n_fu
        onset[pid] = next((dt for dt, r in zip(dates, radii) if r > 0), None)

        plan: list[tuple[StudyKind, int, int, float, float, float]] = []
        if cfg.pre_tnt:
            tumor = rng.uniform(9.0, 12.0) + (cfg.response_signal if outcome is Outcome.LR else 0.0)
            plan.append((StudyKind.PRE_TNT, -int(rng.integers(70, 111)), 2, 0.0, 0.0, tumor))
        scar0 = rng.uniform(7.0, 9.0)
        n_res = int(rng.integers(cfg.restaging_images[0], cfg.restaging_images[1] + 1))
        plan.append((StudyKind.RESTAGING, 0, n_res, scar0, 0.0, 0.0))
        for dt, rad in zip(dates, radii):
            lo, hi = cfg.detection_images if rad >= cfg.detect_threshold else cfg.followup_images
            n_img = int(rng.integers(lo, hi + 1))
            scar = max(4.0, scar0 - 3.0 * min(dt / 730.0, 1.0))
            plan.append((StudyKind.FOLLOW_UP, dt, n_img, scar, rad, 0.0))

        studies = []
        for kind, date, n_img, scar, rad, tumor in plan:
            refs = []
            for k in range(n_img):
                tags = _draw_tags(cfg, rng)
                # the lesion is captured in every image of a study; specks and scar always
                img, center = _render(cfg, pat, rng, scar if kind is not StudyKind.PRE_TNT else 0.0, rad, tags, tumor)
                path = f"images/{pid}/{kind.value}_{date:+05d}_{k}.png"
                images[path] = img
                truth[path] = ImageTruth(pid, kind.value, date, rad, center, tuple(sorted(tags)))
                refs.append(ImageRef(path, frozenset(tags)))
            studies.append(Study(kind, date, tuple(refs)))
        patients.append(PatientRecord(pid, outcome, tuple(studies)))
    return SynthCohort(Cohort(tuple(patients)), images, truth, onset)


def write_synth(synth: SynthCohort, out_dir: str | Path) -> Path:
    """Write images, ``manifest.csv`` and ``truth.csv`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for path, img in synth.images.items():
        write_image(out / path, img)
    manifest = out / "manifest.csv"
    write_manifest(synth.cohort, manifest)
    with (out / "truth.csv").open("w", encoding="utf-8") as fh:
        fh.write("image_path,patient_id,study_kind,date_days,lesion_radius,lesion_row,lesion_col\n")
        for path, t in synth.truth.items():
            r, c = t.lesion_center if t.lesion_center else ("", "")
            rr = f"{r:.3f}" if r != "" else ""
            cc = f"{c:.3f}" if c != "" else ""
            fh.write(f"{path},{t.patient_id},{t.study_kind},{t.date_days},{t.lesion_radius:.3f},{rr},{cc}\n")
    return manifest

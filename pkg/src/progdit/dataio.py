"""Longitudinal dataset mechanics on synthetic progression phantoms.

A phantom is a bright elliptical brain with a brighter cortical rim and a dark
central ventricle. Disease progression ``p = rate(diagnosis) * months``
enlarges the ventricle axes by ``(1 + kappa * p)`` and thins the rim.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .conditioning import DIAGNOSES, SCORE_NAMES, SEVERITY, PromptRecord, ValidationError

log = logging.getLogger(__name__)

DEFAULT_RATES = {"CN": 0.002, "MCI": 0.008, "AD": 0.016}
INTERVAL_BINS = ((0.0, 12.0), (12.0, 24.0), (24.0, 36.0), (36.0, float("inf")))
INTERVAL_LABELS = ("0<=dt<12", "12<=dt<24", "24<=dt<36", "dt>=36")


@dataclass
class VisitRecord:
    subject_id: str
    visit_date: int  # months from the first visit
    diagnosis: str
    scores: dict[str, float | None] = field(default_factory=dict)
    age: float = 70.0
    sex: str = "F"
    education: float = 16.0

    def __post_init__(self):
        if self.visit_date < 0:
            raise ValidationError(f"{self.subject_id}: negative visit date {self.visit_date}")
        if self.diagnosis not in SEVERITY:
            raise ValidationError(f"{self.subject_id}: unknown diagnosis {self.diagnosis!r}")


@dataclass
class VisitPair:
    baseline: VisitRecord
    followup: VisitRecord
    delta_t_months: float
    delta_scores: dict[str, float | None]
    slice_index: int = 0
    baseline_image: str | None = None
    target_image: str | None = None

    @property
    def subject_id(self) -> str:
        return self.baseline.subject_id

    @property
    def progression_group(self) -> str:
        return f"{self.baseline.diagnosis}->{self.followup.diagnosis}"

    def prompt_record(self) -> PromptRecord:
        b = self.baseline
        return PromptRecord(b.diagnosis, self.followup.diagnosis, b.age, b.sex, b.education,
                            self.delta_t_months, dict(self.delta_scores))


# -- QC and pairing ----------------------------------------------------------------
def enforce_monotonic_diagnosis(labels: Sequence[str]) -> list[str]:
    """Replace any reversion with the most recent prior label keeping severity non-decreasing."""
    out: list[str] = []
    for lab in labels:
        if lab not in SEVERITY:
            raise ValidationError(f"unknown diagnosis label {lab!r}")
        if out and SEVERITY[lab] < SEVERITY[out[-1]]:
            out.append(out[-1])
        else:
            out.append(lab)
    return out


def apply_qc(visits: Sequence[VisitRecord]) -> list[VisitRecord]:
    visits = sorted(visits, key=lambda v: v.visit_date)
    fixed = enforce_monotonic_diagnosis([v.diagnosis for v in visits])
    out = []
    for v, d in zip(visits, fixed):
        if d != v.diagnosis:
            log.info("%s month %d: diagnosis %s reassigned to %s", v.subject_id, v.visit_date, v.diagnosis, d)
        out.append(VisitRecord(v.subject_id, v.visit_date, d, dict(v.scores), v.age, v.sex, v.education))
    return out


def score_deltas(base: Mapping[str, float | None], follow: Mapping[str, float | None]) -> dict:
    out = {}
    for s in SCORE_NAMES:
        a, b = base.get(s), follow.get(s)
        out[s] = None if a is None or b is None else float(b) - float(a)
    return out


def pair_visits(visits: Sequence[VisitRecord], all_pairs: bool = False) -> list[VisitPair]:
    """Baseline -> each later visit (or every ordered pair with ``all_pairs``)."""
    visits = sorted(visits, key=lambda v: v.visit_date)
    if len(visits) < 2:
        sid = visits[0].subject_id if visits else "?"
        log.warning("subject %s has %d visit(s); skipped", sid, len(visits))
        return []
    if len({v.subject_id for v in visits}) != 1:
        raise ValidationError("pair_visits expects visits of a single subject")
    starts = range(len(visits) - 1) if all_pairs else [0]
    pairs = []
    for i in starts:
        for j in range(i + 1, len(visits)):
            b, f = visits[i], visits[j]
            pairs.append(VisitPair(b, f, float(f.visit_date - b.visit_date), score_deltas(b.scores, f.scores)))
    return pairs


def participant_split(subjects: Iterable[str], fractions: Mapping[str, float], seed: int) -> dict[str, str]:
    """Assign each subject to one split; counts use largest-remainder rounding."""
    subs = sorted(set(subjects))
    if not subs:
        raise ValueError("participant_split: empty subject list")
    names = list(fractions)
    fr = np.array([fractions[k] for k in names], dtype=np.float64)
    if abs(fr.sum() - 1.0) > 1e-9 or np.any(fr < 0):
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {dict(fractions)}")
    raw = fr * len(subs)
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: len(subs) - counts.sum()]:
        counts[k] += 1
    order = np.random.default_rng(seed).permutation(len(subs))
    out, start = {}, 0
    for name, n in zip(names, counts):
        for i in order[start:start + n]:
            out[subs[i]] = name
        start += n
    return out


def interval_bin(delta_t: float) -> int:
    if delta_t < 0:
        raise ValidationError(f"negative interval {delta_t}")
    for k, (lo, hi) in enumerate(INTERVAL_BINS):
        if lo <= delta_t < hi:
            return k
    raise AssertionError("unreachable")


def bin_by_interval(pairs: Sequence) -> list[list]:
    bins: list[list] = [[] for _ in INTERVAL_BINS]
    for p in pairs:
        dt = p.delta_t_months if hasattr(p, "delta_t_months") else p["delta_t"]
        bins[interval_bin(dt)].append(p)
    return bins


# -- intensity pipeline --------------------------------------------------------------
def minmax_image(img: np.ndarray) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        warnings.warn("minmax_image: constant slice mapped to 0.5", RuntimeWarning, stacklevel=2)
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def histogram_match(img: np.ndarray, reference: np.ndarray, n_bins: int = 256) -> np.ndarray:
    """Monotone piecewise-linear map taking the source CDF onto the reference CDF.

    Knots sit at the source quantiles of ``n_bins + 1`` evenly spaced
    probabilities and map to the reference quantiles at the same
    probabilities, so each 1/n_bins slice of source mass lands on the
    matching slice of reference mass.
    """
    src = np.asarray(img, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64).ravel()
    if ref.max() <= ref.min():
        warnings.warn("histogram_match: constant reference; returning input", RuntimeWarning, stacklevel=2)
        return src.copy()
    probs = np.linspace(0.0, 1.0, n_bins + 1)
    xs = np.quantile(src, probs)
    ys = np.quantile(ref, probs)
    # a source atom spanning several knots maps to the middle of its reference mass
    ux, inv = np.unique(xs, return_inverse=True)
    uy = np.bincount(inv, weights=ys) / np.bincount(inv)
    if len(ux) == 1:
        return np.full_like(src, uy[0])
    return np.interp(src, ux, uy)


# -- phantoms ------------------------------------------------------------------------
@dataclass
class PhantomParams:
    seed: int
    brain_axes: tuple[float, float] = (25.0, 21.0)
    ventricle_axes: tuple[float, float] = (7.0, 4.5)
    cortex_width: float = 3.5
    rates: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_RATES))
    noise: float = 0.01
    kappa: float = 1.0
    thinning: float = 0.4
    softness: float = 0.8
    size: int = 64

    @classmethod
    def random(cls, seed: int, size: int = 64, noise: float = 0.01) -> PhantomParams:
        rng = np.random.default_rng(seed)
        s = size / 64.0
        return cls(
            seed=seed,
            brain_axes=(float(rng.uniform(23.5, 26.5) * s), float(rng.uniform(19.5, 22.5) * s)),
            ventricle_axes=(float(rng.uniform(6.0, 8.0) * s), float(rng.uniform(3.8, 5.0) * s)),
            cortex_width=float(rng.uniform(3.0, 4.0) * s),
            noise=noise,
            size=size,
        )

    def inner_axes(self, p: float) -> tuple[float, float]:
        w = self.cortex_width * max(0.25, 1.0 - self.thinning * p)
        return self.brain_axes[0] - w, self.brain_axes[1] - w

    def ventricle_at(self, p: float) -> tuple[float, float]:
        g = 1.0 + self.kappa * p
        return self.ventricle_axes[0] * g, self.ventricle_axes[1] * g

    def max_progression(self) -> float:
        """Largest ``p`` keeping the ventricle two pixels inside the white-matter ellipse."""
        lo, hi = 0.0, 5.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            ia, ib = self.inner_axes(mid)
            va, vb = self.ventricle_at(mid)
            if va < ia - 2 and vb < ib - 2:
                lo = mid
            else:
                hi = mid
        return lo

    def validate(self) -> None:
        ia, ib = self.inner_axes(0.0)
        va, vb = self.ventricle_axes
        if not (va < ia - 2 and vb < ib - 2):
            raise ValidationError(f"phantom {self.seed}: ventricle {self.ventricle_axes} not inside brain")
        if max(self.brain_axes) >= self.size / 2:
            raise ValidationError(f"phantom {self.seed}: brain exceeds the field of view")


def _soft_inside(xx, yy, a, b, softness):
    # approximate signed distance to the ellipse boundary, smoothed by a logistic edge
    r = np.sqrt((xx / a) ** 2 + (yy / b) ** 2)
    d = (r - 1.0) * min(a, b)
    return 1.0 / (1.0 + np.exp(np.clip(d / softness, -60, 60)))


def progression_score(params: PhantomParams, diagnosis: str, delta_t: float) -> float:
    if diagnosis not in SEVERITY:
        raise ValidationError(f"unknown diagnosis {diagnosis!r}")
    return min(params.rates[diagnosis] * float(delta_t), params.max_progression())


def phantom_generate(params: PhantomParams, diagnosis: str, delta_t: float,
                     noise_seed: int | None = None) -> np.ndarray:
    params.validate()
    p = progression_score(params, diagnosis, delta_t)
    n = params.size
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) - c
    brain = _soft_inside(xx, yy, *params.brain_axes, params.softness)
    inner = _soft_inside(xx, yy, *params.inner_axes(p), params.softness)
    vent = _soft_inside(xx, yy, *params.ventricle_at(p), params.softness)
    img = 0.95 * (brain - inner) + 0.75 * (inner - vent) + 0.15 * vent
    seed = params.seed * 1000 + int(round(delta_t)) if noise_seed is None else noise_seed
    img = img + np.random.default_rng(seed).standard_normal(img.shape) * params.noise
    return np.clip(img, 0.0, 1.0)


def ventricle_area(img: np.ndarray, threshold: float = 0.45) -> int:
    """Pixels of dark regions that do not touch the image border."""
    dark = np.asarray(img) < threshold
    labels, n = ndimage.label(dark)
    if n == 0:
        return 0
    border = set(np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])))
    keep = [k for k in range(1, n + 1) if k not in border]
    return int(np.isin(labels, keep).sum())


# -- synthetic cohort ------------------------------------------------------------------
_SCORE_PROFILE = {
    # (CN mean, AD mean, per-unit-progression slope); higher = worse for slope > 0
    "CDR-SB": (0.1, 5.3, 6.0), "MMSE": (28.9, 21.9, -8.0), "MoCA": (26.2, 16.6, -10.0),
    "FAQ": (0.2, 16.0, 16.0), "RAVLT-immediate": (46.4, 21.5, -25.0),
    "RAVLT-learning": (5.8, 1.7, -4.0), "RAVLT-forgetting": (3.6, 4.2, 1.0),
    "RAVLT-perc-forgetting": (34.6, 91.8, 55.0), "LDELTOTAL": (14.3, 1.6, -12.0),
    "TRABSCOR": (79.1, 200.8, 120.0), "ADAS11": (5.2, 22.0, 17.0), "ADAS13": (8.1, 32.5, 24.0),
    "ADASQ4": (2.5, 8.7, 6.0),
}


VISIT_GAPS = (0, 6, 12, 18)  # months; 0 is a same-month repeat scan
VISIT_GAP_PROBS = (0.1, 0.3, 0.4, 0.2)


def synthetic_subject(index: int, n_visits: int, seed: int, missing_rate: float = 0.1,
                      reversion_rate: float = 0.1) -> list[VisitRecord]:
    """Raw (pre-QC) visits: diagnosis path with occasional spurious reversions and scores."""
    rng = np.random.default_rng([seed, index])
    sid = f"S{index:04d}"
    base = DIAGNOSES[int(rng.choice(3, p=[0.35, 0.4, 0.25]))]
    age = float(np.round(rng.uniform(60, 85), 1))
    sex = "F" if rng.random() < 0.5 else "M"
    edu = float(rng.integers(12, 21))
    months, sev = [0], [SEVERITY[base]]
    for _ in range(n_visits - 1):
        gap = int(rng.choice(VISIT_GAPS, p=VISIT_GAP_PROBS))
        months.append(months[-1] + gap)
        s = sev[-1]
        # a same-month repeat scan never carries a diagnosis change
        if gap > 0 and s < 2 and rng.random() < (0.15 if s == 0 else 0.2):
            s += 1
        sev.append(s)
    visits = []
    for m, s in zip(months, sev):
        label = DIAGNOSES[s]
        if m > 0 and s > 0 and rng.random() < reversion_rate:
            label = DIAGNOSES[s - 1]  # spurious reversion; QC reassigns it
        level = s / 2.0 + DEFAULT_RATES[DIAGNOSES[s]] * m
        scores = {}
        for name in SCORE_NAMES:
            lo, hi, slope = _SCORE_PROFILE[name]
            val = lo + (hi - lo) * min(level, 1.0) * 0.8 + slope * DEFAULT_RATES[DIAGNOSES[s]] * m * 0.2
            val += rng.normal(0, 0.05 * (abs(hi - lo) + 1))
            scores[name] = None if rng.random() < missing_rate else float(np.round(val, 1))
        visits.append(VisitRecord(sid, m, label, scores, age, sex, edu))
    return visits


# -- PGM and manifest -----------------------------------------------------------------
def write_pgm(path: str | Path, img: np.ndarray) -> None:
    x = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = x.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(x.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pos += 1
    raw = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
    return raw.astype(np.float64) / maxval


def read_image(path: str | Path) -> np.ndarray:
    from . import tnsr

    p = Path(path)
    if p.suffix == ".tnsr":
        return tnsr.load(p).astype(np.float64)
    return read_pgm(p)


MANIFEST_FIELDS = ("subject_id", "pair_id", "slice_index", "baseline_path", "target_path", "prompt",
                   "delta_t", "diagnosis_baseline", "diagnosis_target", "split", "score_deltas", "masks")


def write_manifest(path: str | Path, rows: Sequence[Mapping]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            missing = set(MANIFEST_FIELDS) - set(r)
            if missing:
                raise ValidationError(f"manifest row missing fields {sorted(missing)}")
            fh.write(json.dumps(dict(r), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows

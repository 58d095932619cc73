"""Stratified metric tables rendered as CSV and aligned text.

Cells read ``mean ± sd`` at four decimals (two for PSNR). In text tables the
best value of a column carries ``**`` and the runner-up ``*``. Infinite PSNR
values (identical images) are left out of the aggregates and counted in a
footnote.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .dataio import INTERVAL_LABELS, interval_bin
from .metrics import MetricSample, mean_sd, paired_one_sided_ttest

EMPTY = "-"
METRICS = ("ssim", "psnr_db", "mse")
HEADERS = {"ssim": "SSIM", "psnr_db": "PSNR (dB)", "mse": "MSE"}
HIGHER_IS_BETTER = {"ssim": True, "psnr_db": True, "mse": False}
DIGITS = {"ssim": 4, "psnr_db": 2, "mse": 4}


def format_cell(mean: float, sd: float, n: int = 1, digits: int = 4) -> str:
    if n == 0 or math.isnan(mean):
        return EMPTY
    return f"{mean:.{digits}f} ± {sd:.{digits}f}"


@dataclass
class Cell:
    mean: float
    sd: float
    n: int


@dataclass
class ReportRow:
    label: str
    n_subjects: int
    n_slices: int
    cells: dict[str, Cell]
    p_values: dict[str, float] = field(default_factory=dict)


@dataclass
class StratifiedReport:
    title: str
    key: str
    rows: list[ReportRow]
    total: int
    inf_psnr: int = 0

    def row(self, label: str) -> ReportRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def _aggregate(label: str, samples: Sequence[MetricSample]) -> tuple[ReportRow, int]:
    cells = {m: Cell(*mean_sd([getattr(s, m) for s in samples])) for m in METRICS}
    inf = sum(1 for s in samples if math.isinf(s.psnr_db))
    return ReportRow(label, len({s.subject_id for s in samples}), len(samples), cells), inf


GROUPINGS: dict[str, tuple[Callable[[MetricSample], str], Sequence[str] | None]] = {
    "interval": (lambda s: INTERVAL_LABELS[interval_bin(s.delta_t)], INTERVAL_LABELS),
    "group": (lambda s: s.progression_group,
              ("CN->CN", "CN->MCI", "CN->AD", "MCI->MCI", "MCI->AD", "AD->AD")),
}


def stratified_report(samples: Sequence[MetricSample], grouping: str = "group",
                      title: str | None = None) -> StratifiedReport:
    """Aggregate per cell of ``grouping``; listed cells with no samples render as empty rows."""
    key_fn, order = GROUPINGS[grouping]
    buckets: dict[str, list[MetricSample]] = {}
    for s in samples:
        buckets.setdefault(key_fn(s), []).append(s)
    labels = list(order or []) + sorted(set(buckets) - set(order or []))
    rows, inf = [], 0
    for lab in labels:
        row, k = _aggregate(lab, buckets.get(lab, []))
        rows.append(row)
        inf += k
    return StratifiedReport(title or f"by {grouping}", grouping, rows, len(samples), inf)


def comparison_report(models: dict[str, Sequence[MetricSample]], reference: str,
                      title: str = "model comparison") -> StratifiedReport:
    """One row per model; each other row carries one-sided paired p-values against its reference.

    The alternative is that the reference is better: higher SSIM and PSNR, lower MSE.
    """
    ref = sorted(models[reference], key=lambda s: s.pair_id)
    rows, inf, total = [], 0, 0
    for name, samples in models.items():
        row, k = _aggregate(name, samples)
        inf += k
        total += len(samples)
        if name != reference:
            other = sorted(samples, key=lambda s: s.pair_id)
            if [s.pair_id for s in other] != [s.pair_id for s in ref]:
                raise ValueError(f"{name} and {reference} are not scored on the same pairs")
            for m in METRICS:
                a = [getattr(s, m) for s in ref]
                b = [getattr(s, m) for s in other]
                if len(a) < 2 or not all(math.isfinite(v) for v in a + b):
                    row.p_values[m] = math.nan
                    continue
                direction = "greater" if HIGHER_IS_BETTER[m] else "less"
                row.p_values[m] = paired_one_sided_ttest(a, b, direction).p
        rows.append(row)
    return StratifiedReport(title, "model", rows, total, inf)


def _ranks(report: StratifiedReport, metric: str) -> dict[str, str]:
    vals = [(r.cells[metric].mean, r.label) for r in report.rows if r.cells[metric].n > 0]
    vals.sort(reverse=HIGHER_IS_BETTER[metric])
    marks = {}
    if len(vals) >= 2:
        marks[vals[0][1]] = "**"
        marks[vals[1][1]] = "*"
    return marks


def to_text(report: StratifiedReport) -> str:
    marks = {m: _ranks(report, m) for m in METRICS}
    has_p = any(r.p_values for r in report.rows)
    header = [report.key, "subjects", "slices"] + [HEADERS[m] for m in METRICS]
    if has_p:
        header += [f"p {HEADERS[m]}" for m in METRICS]
    body = []
    for r in report.rows:
        line = [r.label, str(r.n_subjects), str(r.n_slices)]
        for m in METRICS:
            c = r.cells[m]
            line.append(format_cell(c.mean, c.sd, c.n, DIGITS[m]) + marks[m].get(r.label, ""))
        if has_p:
            line += [EMPTY if m not in r.p_values or math.isnan(r.p_values[m]) else f"{r.p_values[m]:.3g}"
                     for m in METRICS]
        body.append(line)
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    fmt = lambda cols: "  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()  # noqa: E731
    out = [report.title, fmt(header), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    out.append(f"total slices: {report.total}; ** best, * second best")
    if report.inf_psnr:
        out.append(f"note: {report.inf_psnr} sample(s) with infinite PSNR (inf) excluded from PSNR aggregates")
    return "\n".join(out) + "\n"


def to_csv(report: StratifiedReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "row", "metric", "mean", "sd", "n", "n_subjects", "n_slices", "p_value"])
    for r in report.rows:
        for m in METRICS:
            c = r.cells[m]
            p = r.p_values.get(m, math.nan)
            w.writerow([report.key, r.label, m, "" if c.n == 0 else repr(c.mean),
                        "" if c.n == 0 else repr(c.sd), c.n, r.n_subjects, r.n_slices,
                        "" if math.isnan(p) else repr(p)])
    return buf.getvalue()


def samples_csv(samples: Sequence[MetricSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair_id", "subject_id", "delta_t", "group", "ssim", "psnr_db", "mse"])
    for s in samples:
        psnr = "inf" if math.isinf(s.psnr_db) else repr(s.psnr_db)
        w.writerow([s.pair_id, s.subject_id, s.delta_t, s.progression_group, repr(s.ssim), psnr, repr(s.mse)])
    return buf.getvalue()

"""Forecast error metrics (MAE, RMSE, MRE), grouped breakdowns and plot-ready writers.

Per-row errors are ordinary float64 values; their means are correctly
rounded (exact sum, one rounding at the end), so every metric is independent
of row order and reproducible to the last bit. RMSE squares the errors
exactly and correctly rounds the square root of their exact mean, so it can
never fall below MAE through rounding or underflow.
"""

from __future__ import annotations

import csv
import io
import json
import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .domain import ConditionGroup, classify_conditions
from .ingest import atomic_write_text

MRE_EPSILON = 1e-6
CDF_STEP = 0.05
CDF_MAX = 5.0


@dataclass(frozen=True, eq=False)
class ForecastReport:
    """Predicted vs observed congestion, one row per (segment, day, slot)."""

    segment_ids: np.ndarray
    days: np.ndarray
    slots: np.ndarray
    predicted: np.ndarray
    observed: np.ndarray
    hours: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("segment_ids", "days", "slots", "predicted", "observed", "hours"):
            arrays[name] = np.asarray(getattr(self, name))
        n = arrays["observed"].shape[0]
        if any(a.shape != (n,) for a in arrays.values()):
            raise ValueError("all report columns must be 1-D and equally long")
        arrays["predicted"] = arrays["predicted"].astype(np.float64)
        arrays["observed"] = arrays["observed"].astype(np.float64)
        if not np.all(np.isfinite(arrays["predicted"])):
            raise ValueError("predictions must be finite")
        if not np.all(arrays["observed"] >= 0):
            raise ValueError("observed congestion levels must be >= 0")
        for name, a in arrays.items():
            object.__setattr__(self, name, a)

    def __len__(self):
        return self.observed.shape[0]

    @property
    def conditions(self) -> np.ndarray:
        return classify_conditions(self.observed)

    @classmethod
    def from_predictions(cls, segment_id, days, slots, predicted, observed, start_hour=6, slot_minutes=5):
        days = np.asarray(days)
        slots = np.asarray(slots)
        hours = start_hour + (slots * slot_minutes) // 60
        return cls(np.full(days.shape, segment_id, dtype=object), days, slots, predicted, observed, hours)

    @classmethod
    def concat(cls, reports: Sequence["ForecastReport"]) -> "ForecastReport":
        if not reports:
            raise ValueError("nothing to concatenate")
        cols = ("segment_ids", "days", "slots", "predicted", "observed", "hours")
        return cls(*(np.concatenate([getattr(r, c) for r in reports]) for c in cols))

    def subset(self, mask) -> "ForecastReport":
        return ForecastReport(self.segment_ids[mask], self.days[mask], self.slots[mask],
                              self.predicted[mask], self.observed[mask], self.hours[mask])


@dataclass
class MetricsSummary:
    """Errors over one group of rows. `mre` is None when no row has c > epsilon."""

    mae: float
    rmse: float
    mre: Optional[float]
    count: int
    mre_count: int
    excluded: int
    by_condition: Dict[str, Optional["MetricsSummary"]] = field(default_factory=dict)
    by_hour: Dict[int, "MetricsSummary"] = field(default_factory=dict)

    def to_dict(self):
        out = {"mae": self.mae, "rmse": self.rmse, "mre": self.mre, "count": self.count,
               "mre_count": self.mre_count, "mre_excluded": self.excluded}
        if self.by_condition:
            out["by_condition"] = {k: (v.to_dict() if v is not None else None) for k, v in self.by_condition.items()}
        if self.by_hour:
            out["by_hour"] = {str(k): v.to_dict() for k, v in self.by_hour.items()}
        return out


def exact_mean(values) -> float:
    """Correctly rounded mean of float64 values.

    The exact sum is split into non-overlapping float parts by repeated
    `math.fsum`; only the final division by the count is done in rationals.
    """
    values = [float(v) for v in np.asarray(values, dtype=np.float64).reshape(-1)]
    if not values:
        raise ValueError("mean of no values")
    parts = []
    try:
        while True:
            part = math.fsum(values + [-p for p in parts])
            if part == 0.0:
                break
            parts.append(part)
    except OverflowError:  # partial sums beyond the float range
        parts = values
    total = sum((Fraction(p) for p in parts), Fraction(0))
    return float(total / len(values))


def root_mean_square(values) -> float:
    """Correctly rounded sqrt(mean(v**2)) of float64 values, with exact squares."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("mean of no values")
    # each value is num / 2**k; sum the squares over the common denominator 2**(2K)
    ratios = [float(v).as_integer_ratio() for v in values]
    big = max(den.bit_length() for _, den in ratios) - 1
    total = sum(num * num << 2 * (big - den.bit_length() + 1) for num, den in ratios)
    return _rounded_sqrt(total, values.size << 2 * big)


def _rounded_sqrt(num: int, den: int) -> float:
    """sqrt(num / den) rounded once to the nearest float64."""
    if num == 0:
        return 0.0
    # carry at least 60 bits in the integer root, then a sticky bit for the remainder
    shift = max(0, 120 - (num.bit_length() - den.bit_length()))
    shift += shift & 1
    q, r = divmod(num << shift, den)
    root = math.isqrt(q)
    sticky = int(r != 0 or root * root != q)
    return ((root << 1) | sticky) / (1 << (shift // 2 + 1))  # int / int rounds correctly


def error_metrics(predicted, observed, mre_epsilon: float = MRE_EPSILON) -> MetricsSummary:
    """MAE, RMSE and MRE of one group of rows (no breakdowns)."""
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    o = np.asarray(observed, dtype=np.float64).reshape(-1)
    if p.shape != o.shape:
        raise ValueError("predicted and observed differ in length")
    n = p.size
    if n == 0:
        raise ValueError("no rows to evaluate")
    err = np.abs(p - o)
    mae = exact_mean(err)
    rmse = root_mean_square(err)
    eligible = o > mre_epsilon
    k = int(eligible.sum())
    mre = exact_mean(err[eligible] / o[eligible]) if k else None
    return MetricsSummary(mae, rmse, mre, n, k, n - k)


def compute_metrics(report: ForecastReport, mre_epsilon: float = MRE_EPSILON) -> MetricsSummary:
    """Overall metrics plus per-condition and per-hour cells.

    Rows with observed c <= `mre_epsilon` are left out of MRE only (their
    count is reported); MAE and RMSE use every row.
    """
    summary = error_metrics(report.predicted, report.observed, mre_epsilon)
    conditions = report.conditions
    for group in ConditionGroup:
        mask = conditions == group
        summary.by_condition[group.value] = (
            error_metrics(report.predicted[mask], report.observed[mask], mre_epsilon) if mask.any() else None)
    for hour in np.unique(report.hours):
        mask = report.hours == hour
        summary.by_hour[int(hour)] = error_metrics(report.predicted[mask], report.observed[mask], mre_epsilon)
    return summary


def relative_errors(report: ForecastReport, mre_epsilon: float = MRE_EPSILON) -> np.ndarray:
    ok = report.observed > mre_epsilon
    return np.abs(report.predicted[ok] - report.observed[ok]) / report.observed[ok]


def mre_cdf(values, step: float = CDF_STEP, cap: float = CDF_MAX):
    """Empirical cdf of per-row relative errors at multiples of `step`.

    Thresholds run up to the largest value (at most `cap`); when values exceed
    `cap` a final row at +inf closes the table at 1.0.
    """
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        return []
    top = min(values[-1], cap)
    n_steps = max(1, int(math.ceil(round(top / step, 9))))
    rows = []
    for k in range(1, n_steps + 1):
        thr = round(k * step, 10)
        rows.append((thr, np.searchsorted(values, thr, side="right") / values.size))
    if values[-1] > rows[-1][0]:
        rows.append((math.inf, 1.0))
    return rows


@dataclass
class Breakdown:
    overall: MetricsSummary
    grid: Dict[tuple, MetricsSummary]  # (condition, hour) -> cell; absent combinations omitted
    cdf: list


def breakdown(report: ForecastReport, mre_epsilon: float = MRE_EPSILON) -> Breakdown:
    overall = compute_metrics(report, mre_epsilon)
    conditions = report.conditions
    grid = {}
    for group in ConditionGroup:
        for hour in np.unique(report.hours):
            mask = (conditions == group) & (report.hours == hour)
            if mask.any():
                grid[(group.value, int(hour))] = error_metrics(report.predicted[mask], report.observed[mask],
                                                               mre_epsilon)
    return Breakdown(overall, grid, mre_cdf(relative_errors(report, mre_epsilon)))


def all_cells(bd: Breakdown):
    """Every non-empty metrics cell of a breakdown, overall first."""
    cells = [bd.overall]
    cells += [c for c in bd.overall.by_condition.values() if c is not None]
    cells += list(bd.overall.by_hour.values())
    cells += list(bd.grid.values())
    return cells


# ---------------------------------------------------------------- writers

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_metrics_json(path, summary: MetricsSummary, extra: Optional[dict] = None) -> None:
    doc = summary.to_dict()
    if extra:
        doc.update(extra)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_breakdown_csv(path, bd: Breakdown) -> None:
    rows = []
    for (cond, hour), c in sorted(bd.grid.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        rows.append((cond, hour, c.count, c.mae, c.rmse, c.mre, c.mre_count))
    for cond, c in bd.overall.by_condition.items():
        if c is not None:
            rows.append((cond, "all", c.count, c.mae, c.rmse, c.mre, c.mre_count))
    for hour, c in sorted(bd.overall.by_hour.items()):
        rows.append(("all", hour, c.count, c.mae, c.rmse, c.mre, c.mre_count))
    o = bd.overall
    rows.append(("all", "all", o.count, o.mae, o.rmse, o.mre, o.mre_count))
    atomic_write_text(path, _csv_text(("condition", "hour", "count", "mae", "rmse", "mre", "mre_count"), rows))


def write_mre_cdf_csv(path, cdf) -> None:
    atomic_write_text(path, _csv_text(("threshold", "fraction"), [(float(t), float(f)) for t, f in cdf]))


def write_comparison_csv(path, table) -> None:
    """`table` rows: dicts with method, slot_minutes, seed, status, mae, rmse, mre."""
    header = ("method", "slot_minutes", "seed", "status", "mae", "rmse", "mre", "error")
    rows = [tuple(r.get(k) for k in header) for r in table]
    atomic_write_text(path, _csv_text(header, rows))

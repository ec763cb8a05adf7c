"""Core value types: congestion level, traffic-condition groups, series grid, Min-Max scaling."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

VALID_SLOT_MINUTES = (5, 10, 15, 30, 60)

NORMAL_UPPER = 1.0
LIGHT_UPPER = 3.0


class InvalidBaselineError(ValueError):
    pass


class DomainError(ValueError):
    pass


class InvalidParamsError(ValueError):
    pass


def compute_congestion_level(avg_travel_time, baseline_travel_time):
    """Relative excess of the average travel time over the free-flow baseline, clamped at zero.

    Works on scalars or arrays; returns a float for scalar input.
    """
    if not np.all(np.asarray(baseline_travel_time) > 0):
        raise InvalidBaselineError(f"baseline travel time must be positive, got {baseline_travel_time!r}")
    t = np.asarray(avg_travel_time, dtype=float)
    if np.any(t < 0):
        raise DomainError("average travel time must be non-negative")
    c = np.maximum(0.0, (t - baseline_travel_time) / baseline_travel_time)
    return float(c) if c.ndim == 0 else c


class ConditionGroup(enum.Enum):
    NORMAL = "normal"
    LIGHT = "light"
    HEAVY = "heavy"

    def __str__(self):
        return self.value


def classify_condition(c: float) -> ConditionGroup:
    if not c >= 0:  # also rejects NaN
        raise DomainError(f"congestion level must be >= 0, got {c!r}")
    if c <= NORMAL_UPPER:
        return ConditionGroup.NORMAL
    if c <= LIGHT_UPPER:
        return ConditionGroup.LIGHT
    return ConditionGroup.HEAVY


def classify_conditions(values) -> np.ndarray:
    """Vectorised `classify_condition`; returns an object array of ConditionGroup."""
    values = np.asarray(values, dtype=float)
    if np.any(~(values >= 0)):
        raise DomainError("congestion levels must be >= 0")
    out = np.empty(values.shape, dtype=object)
    out[values <= NORMAL_UPPER] = ConditionGroup.NORMAL
    out[(values > NORMAL_UPPER) & (values <= LIGHT_UPPER)] = ConditionGroup.LIGHT
    out[values > LIGHT_UPPER] = ConditionGroup.HEAVY
    return out


@dataclass(frozen=True)
class NormalizationParams:
    min: float
    max: float

    def __post_init__(self):
        if not (np.isfinite(self.min) and np.isfinite(self.max)):
            raise InvalidParamsError("normalization bounds must be finite")
        if self.max < self.min:
            raise InvalidParamsError(f"max ({self.max}) < min ({self.min})")

    @classmethod
    def fit(cls, values) -> "NormalizationParams":
        values = np.asarray(values, dtype=float)
        return cls(float(values.min()), float(values.max()))

    @property
    def span(self) -> float:
        return self.max - self.min

    def to_dict(self):
        return {"min": self.min, "max": self.max}


def normalize(value, params: NormalizationParams):
    """Scale into [0, 1]; out-of-range inputs are clamped. A degenerate range maps to 0."""
    x = np.asarray(value, dtype=float)
    if params.span == 0:
        out = np.zeros_like(x)
    else:
        out = np.clip((x - params.min) / params.span, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def denormalize(value, params: NormalizationParams):
    x = np.asarray(value, dtype=float)
    out = x * params.span + params.min
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SlotIndex:
    day: int
    slot: int
    slots_per_day: int

    def __post_init__(self):
        if self.slots_per_day <= 0:
            raise ValueError("slots_per_day must be positive")
        if self.day < 0 or self.slot < 0:
            raise IndexError(f"negative index ({self.day}, {self.slot})")
        if self.slot >= self.slots_per_day:
            raise IndexError(f"slot {self.slot} outside day of {self.slots_per_day} slots")

    @property
    def flat(self) -> int:
        return self.day * self.slots_per_day + self.slot


def slots_per_day(slot_minutes: int, start_hour: int = 6, end_hour: int = 24) -> int:
    if slot_minutes not in VALID_SLOT_MINUTES:
        raise ValueError(f"slot_minutes must be one of {VALID_SLOT_MINUTES}, got {slot_minutes}")
    if not 0 <= start_hour < end_hour <= 24:
        raise ValueError(f"invalid hour window {start_hour}-{end_hour}")
    return (end_hour - start_hour) * 60 // slot_minutes


@dataclass(frozen=True, eq=False)
class CongestionSeries:
    """Congestion levels of one road segment on a rectangular (day, slot) grid.

    `dates` optionally labels each day (ISO strings); `baseline_travel_time` is
    None for series that did not come from travel times (e.g. synthetic data).
    """

    segment_id: str
    slot_minutes: int
    values: np.ndarray
    start_hour: int = 6
    end_hour: int = 24
    baseline_travel_time: Optional[float] = None
    dates: Optional[Sequence[str]] = field(default=None)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("values must be a 2-D (day, slot) grid")
        n = slots_per_day(self.slot_minutes, self.start_hour, self.end_hour)
        if values.shape[1] != n:
            raise ValueError(f"expected {n} slots per day, got {values.shape[1]}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise DomainError("congestion levels must be finite and >= 0")
        if self.baseline_travel_time is not None and not self.baseline_travel_time > 0:
            raise InvalidBaselineError("baseline travel time must be positive")
        if self.dates is not None:
            if len(self.dates) != values.shape[0]:
                raise ValueError("one date label per day required")
            object.__setattr__(self, "dates", tuple(self.dates))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    @property
    def slots_per_day(self) -> int:
        return self.values.shape[1]

    def hour_of_slot(self, slot) -> np.ndarray:
        return self.start_hour + (np.asarray(slot) * self.slot_minutes) // 60

    def date_labels(self) -> tuple:
        if self.dates is not None:
            return self.dates
        return tuple(f"day{i:03d}" for i in range(self.n_days))

    def with_values(self, values, **changes) -> "CongestionSeries":
        kw = dict(
            segment_id=self.segment_id,
            slot_minutes=self.slot_minutes,
            start_hour=self.start_hour,
            end_hour=self.end_hour,
            baseline_travel_time=self.baseline_travel_time,
            dates=self.dates,
        )
        kw.update(changes)
        return CongestionSeries(values=values, **kw)

    def congested_fraction(self) -> float:
        return float(np.mean(self.values > NORMAL_UPPER))


def coarsen_series(series: CongestionSeries, slot_minutes: int) -> CongestionSeries:
    """Merge groups of consecutive slots into wider slots by averaging.

    Averaging congestion levels equals the congestion of the averaged travel
    time whenever no slot was clamped at zero and slots carry equal traffic.
    """
    if slot_minutes % series.slot_minutes:
        raise ValueError(f"{slot_minutes} is not a multiple of {series.slot_minutes}")
    factor = slot_minutes // series.slot_minutes
    n_new = slots_per_day(slot_minutes, series.start_hour, series.end_hour)
    merged = series.values.reshape(series.n_days, n_new, factor).mean(axis=2)
    return series.with_values(merged, slot_minutes=slot_minutes)


def estimate_baseline_travel_time(slot_averages, slot_hours, window=(22, 24)) -> float:
    """Free-flow travel time from per-slot average travel times.

    Median of the slots whose hour falls in the light-traffic `window`; the
    5th percentile of all slots when the window holds no data.
    """
    slot_averages = np.asarray(slot_averages, dtype=float)
    slot_hours = np.asarray(slot_hours)
    ok = np.isfinite(slot_averages)
    if not np.any(ok):
        raise InvalidBaselineError("no travel-time observations to estimate a baseline from")
    in_window = ok & (slot_hours >= window[0]) & (slot_hours < window[1])
    if np.any(in_window):
        est = float(np.median(slot_averages[in_window]))
    else:
        est = float(np.percentile(slot_averages[ok], 5))
    if not est > 0:
        raise InvalidBaselineError(f"estimated baseline {est} is not positive")
    return est

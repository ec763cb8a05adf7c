"""Seedable synthetic congestion series with peak hours, day-to-day drift, local noise and incidents.

    level[i, j] = profile_i(j) * amplitude(i)
    c[i, j] = max(0, level * (1 + r(i, j)) + e(i, j) + incident(i, j))

`profile_i` is a floor plus Gaussian bumps at the peak hours, shifted a little
each day; `amplitude` is an AR(1) process around 1 across days; `r` and `e`
are relative and absolute slot-level noise (busier slots fluctuate more),
independent across slots by default and AR(1) when `noise_ar` is set, so
averaging into coarser slots smooths them; `incident` is a sum of rare
spikes with exponential decay.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .domain import CongestionSeries, slots_per_day
from .ingest import write_series_csv

# (centre hour, width in hours, amplitude); calibrated by scripts/calibrate_synth.py
DEFAULT_PEAKS = ((8.25, 0.8555, 3.2), (17.5, 0.941, 3.6))


@dataclass(frozen=True)
class SynthConfig:
    days: int = 30
    slot_minutes: int = 5
    start_hour: int = 6
    end_hour: int = 24
    peaks: Tuple[Tuple[float, float, float], ...] = DEFAULT_PEAKS
    floor: float = 0.35
    day_ar: float = 0.8
    day_sigma: float = 0.15
    peak_jitter_minutes: float = 15.0
    noise_sigma: float = 0.05
    relative_noise_sigma: float = 0.15
    noise_ar: float = 0.0
    incident_rate: float = 0.1
    incident_magnitude: float = 3.0
    incident_decay_minutes: float = 30.0
    include_weekends: bool = False
    weekend_scale: float = 0.4
    start_date: str = "2024-01-01"
    segments: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "peaks", tuple(tuple(float(v) for v in p) for p in self.peaks))
        if any(len(p) != 3 for p in self.peaks):
            raise ValueError("each peak is (centre hour, width hours, amplitude)")
        if any(p[1] <= 0 or p[2] < 0 for p in self.peaks):
            raise ValueError("peak widths must be positive and amplitudes non-negative")
        if self.peak_jitter_minutes < 0:
            raise ValueError("peak jitter must be non-negative")
        if min(self.floor, self.day_sigma, self.noise_sigma, self.relative_noise_sigma,
               self.incident_magnitude) < 0:
            raise ValueError("amplitudes and noise levels must be non-negative")
        if not (-1 < self.day_ar < 1 and -1 < self.noise_ar < 1):
            raise ValueError("AR coefficients must lie in (-1, 1)")
        if self.incident_rate < 0 or self.incident_decay_minutes <= 0:
            raise ValueError("incident rate must be >= 0 and decay positive")
        if self.days < 1 or self.segments < 1:
            raise ValueError("need at least one day and one segment")
        slots_per_day(self.slot_minutes, self.start_hour, self.end_hour)

    @property
    def slots_per_day(self) -> int:
        return slots_per_day(self.slot_minutes, self.start_hour, self.end_hour)

    def to_dict(self):
        doc = dataclasses.asdict(self)
        doc["peaks"] = [list(p) for p in self.peaks]
        return doc

    @classmethod
    def from_dict(cls, doc) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "peaks" in doc:
            doc["peaks"] = tuple(tuple(p) for p in doc["peaks"])
        return cls(**doc)

    def replace(self, **changes) -> "SynthConfig":
        return dataclasses.replace(self, **changes)


def slot_hours(config: SynthConfig) -> np.ndarray:
    """Fractional hour at the middle of every slot."""
    return config.start_hour + (np.arange(config.slots_per_day) + 0.5) * config.slot_minutes / 60.0


def base_profile(config: SynthConfig, shifts=None) -> np.ndarray:
    """Floor plus Gaussian peaks over the slots of a day.

    `shifts` (days, n_peaks) in hours moves each peak per day and yields a
    (days, slots) array; without it a single unshifted profile is returned.
    """
    h = slot_hours(config)
    s = np.zeros((1, len(config.peaks))) if shifts is None else np.asarray(shifts, dtype=np.float64)
    prof = np.full((s.shape[0], h.size), config.floor)
    for k, (centre, width, amp) in enumerate(config.peaks):
        prof += amp * np.exp(-0.5 * ((h[None, :] - centre - s[:, k:k + 1]) / width) ** 2)
    return prof[0] if shifts is None else prof


def calendar(config: SynthConfig):
    """(ISO date labels, weekend flags) for the generated days."""
    day = dt.date.fromisoformat(config.start_date)
    labels, weekend = [], []
    while len(labels) < config.days:
        is_weekend = day.weekday() >= 5
        if config.include_weekends or not is_weekend:
            labels.append(day.isoformat())
            weekend.append(is_weekend)
        day += dt.timedelta(days=1)
    return tuple(labels), np.array(weekend)


def _ar1(rng, n_series, length, phi, sigma):
    """Stationary AR(1) paths with marginal standard deviation `sigma`."""
    out = np.zeros((n_series, length))
    if sigma == 0:
        return out
    innov = rng.standard_normal((n_series, length)) * sigma * np.sqrt(1 - phi ** 2)
    out[:, 0] = rng.standard_normal(n_series) * sigma
    for j in range(1, length):
        out[:, j] = phi * out[:, j - 1] + innov[:, j]
    return out


def _incidents(rng, config: SynthConfig, n_days: int) -> np.ndarray:
    n = config.slots_per_day
    out = np.zeros((n_days, n))
    if config.incident_rate == 0 or config.incident_magnitude == 0:
        return out
    counts = rng.poisson(config.incident_rate, size=n_days)
    minutes = np.arange(n) * config.slot_minutes
    for i, k in enumerate(counts):
        for _ in range(k):
            onset = rng.uniform(0, n * config.slot_minutes)
            size = rng.exponential(config.incident_magnitude)
            lag = minutes - onset
            out[i] += np.where(lag >= 0, size * np.exp(-np.maximum(lag, 0) / config.incident_decay_minutes), 0.0)
    return out


def generate_values(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = config.slots_per_day
    _, weekend = calendar(config)
    amplitude = 1.0 + _ar1(rng, 1, config.days, config.day_ar, config.day_sigma)[0]
    amplitude = np.maximum(amplitude, 0.0)
    amplitude = np.where(weekend, amplitude * config.weekend_scale, amplitude)
    shifts = rng.standard_normal((config.days, len(config.peaks))) * config.peak_jitter_minutes / 60.0
    noise = _ar1(rng, config.days, n, config.noise_ar, config.noise_sigma)
    relative = _ar1(rng, config.days, n, config.noise_ar, config.relative_noise_sigma)
    level = base_profile(config, shifts) * amplitude[:, None]
    values = level * (1.0 + relative) + noise + _incidents(rng, config, config.days)
    return np.maximum(values, 0.0)


def segment_name(k: int) -> str:
    return f"synth-{k:03d}"


def generate(config: SynthConfig = SynthConfig()):
    """One CongestionSeries per segment (a single series when `segments` == 1)."""
    rng = np.random.default_rng(config.seed)
    labels, _ = calendar(config)
    out = []
    for k in range(config.segments):
        values = generate_values(config, rng)
        out.append(CongestionSeries(segment_name(k), config.slot_minutes, values, config.start_hour,
                                    config.end_hour, None, labels))
    return out[0] if config.segments == 1 else out


@dataclass(frozen=True, eq=False)
class Benchmark:
    series: tuple
    config: SynthConfig
    split: Tuple[range, range, range]


def make_benchmark(config: SynthConfig = SynthConfig(), split=(20, 5, 5), out_dir: Optional[str] = None,
                   name: str = "series.csv") -> Benchmark:
    """Generate a dataset bundle with a chronological train/validation/test split.

    With `out_dir` the series CSV and its JSON sidecar (holding the generator
    config and the split) are written there.
    """
    if sum(split) > config.days:
        raise ValueError(f"split {split} needs more than {config.days} days")
    result = generate(config)
    series = (result,) if isinstance(result, CongestionSeries) else tuple(result)
    a, b, c = split
    bundle = Benchmark(series, config, (range(0, a), range(a, a + b), range(a + b, a + b + c)))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_series_csv(os.path.join(out_dir, name), series,
                         {"synth_config": config.to_dict(), "split_days": list(split)})
    return bundle


def benchmark_seeds(base: SynthConfig, seeds: Sequence[int]):
    return [make_benchmark(base.replace(seed=s)) for s in seeds]

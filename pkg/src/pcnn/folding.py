"""Time-series folding: (day, slot) history -> (d+1) x 2t input matrices and 1-D baseline vectors.

Row 0 of a matrix holds the `t` most recent same-day values followed by their
mirror image; rows 1..d hold a `2t` window from each of the preceding days,
centred on the target slot. Out-of-range indices are padded as follows:

* slot < 0 on a past day -> slot 0 of that day
* slot >= N on a past day -> slot N-1 of that day
* day < 0 -> day 0
* slot < 0 on the current day -> slot 0 of the current day when n >= 1; when
  n == 0 nothing of the current day has been observed yet, so the last slot of
  the previous day is used instead. Slot n of the current day is never read.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .domain import CongestionSeries


@dataclass(frozen=True)
class FoldingConfig:
    d: int = 9
    t: int = 6
    u: int = 1

    def __post_init__(self):
        for name in ("d", "t", "u"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.d + 1, 2 * self.t)

    @property
    def vector_length(self) -> int:
        return self.t + self.d

    def with_horizon(self, u: int) -> "FoldingConfig":
        return FoldingConfig(self.d, self.t, u)


@dataclass(frozen=True, eq=False)
class InputMatrix:
    values: np.ndarray
    target: float
    origin: tuple

    @property
    def shape(self):
        return self.values.shape


def _check_position(m, n, n_slots, n_days=None):
    if m < 0 or n < 0:
        raise IndexError(f"negative position ({m}, {n})")
    if n >= n_slots:
        raise IndexError(f"slot {n} outside day of {n_slots} slots")
    if n_days is not None and m >= n_days:
        raise IndexError(f"day {m} outside series of {n_days} days")
    if m == 0 and n == 0:
        raise IndexError("no observations precede (0, 0)")


def matrix_indices(m, n, n_slots: int, config: FoldingConfig):
    """(days, slots) integer grids of shape (K, d+1, 2t) for target positions (m, n).

    `m` and `n` may be scalars or equal-length arrays. Horizon `config.u` shifts
    the historical rows to be centred on slot n+u-1; row 0 always ends at n-1.
    """
    m = np.atleast_1d(np.asarray(m, dtype=np.int64))
    n = np.atleast_1d(np.asarray(n, dtype=np.int64))
    d, t, u = config.d, config.t, config.u
    cols = np.arange(2 * t)

    days = np.empty((m.size, d + 1, 2 * t), dtype=np.int64)
    slots = np.empty_like(days)

    # row 0: mirrored recent window
    offsets = np.minimum(cols, 2 * t - 1 - cols) - t  # -t .. -1 .. -t
    s0 = n[:, None] + offsets[None, :]
    d0 = np.broadcast_to(m[:, None], s0.shape).copy()
    before_start = s0 < 0
    first_slot = n == 0
    # n >= 1: pad with slot 0 of the same day
    s0 = np.where(before_start & ~first_slot[:, None], 0, s0)
    # n == 0: whole row comes from the previous day's last slot
    s0 = np.where(first_slot[:, None], n_slots - 1, s0)
    d0 = np.where(first_slot[:, None], m[:, None] - 1, d0)
    days[:, 0, :] = d0
    slots[:, 0, :] = s0

    # rows 1..d: previous days around slot n+u-1
    lag = np.arange(1, d + 1)
    hist_days = np.maximum(m[:, None] - lag[None, :], 0)
    hist_slots = np.clip(n[:, None] + (u - 1) - t + cols[None, :], 0, n_slots - 1)
    days[:, 1:, :] = hist_days[:, :, None]
    slots[:, 1:, :] = hist_slots[:, None, :]
    return days, slots


def vector_indices(m, n, n_slots: int, config: FoldingConfig):
    """(days, slots) grids of shape (K, t+d) for the 1-D input <recent t slots, slot n+u-1 of d past days>."""
    m = np.atleast_1d(np.asarray(m, dtype=np.int64))
    n = np.atleast_1d(np.asarray(n, dtype=np.int64))
    d, t, u = config.d, config.t, config.u
    full_days, full_slots = matrix_indices(m, n, n_slots, config)
    recent_days = full_days[:, 0, :t]
    recent_slots = full_slots[:, 0, :t]
    lag = np.arange(1, d + 1)
    hist_days = np.maximum(m[:, None] - lag[None, :], 0)
    hist_slots = np.broadcast_to(np.minimum(n + u - 1, n_slots - 1)[:, None], hist_days.shape)
    return (np.concatenate([recent_days, hist_days], axis=1),
            np.concatenate([recent_slots, hist_slots], axis=1))


def _target(series: CongestionSeries, m: int, slot: int) -> float:
    if slot < series.slots_per_day:
        return float(series.values[m, slot])
    return float("nan")


def build_input_matrix(series: CongestionSeries, m: int, n: int, config: FoldingConfig) -> InputMatrix:
    """One-step input matrix for predicting c[m, n] (the horizon in `config` is ignored)."""
    return build_multistep_matrix(series, m, n, 1, config)


def build_multistep_matrix(series: CongestionSeries, m: int, n: int, u: int,
                           config: FoldingConfig) -> InputMatrix:
    """Input matrix for the u-step-ahead target c[m, n+u-1].

    The target is NaN when n+u-1 runs past the end of the day; the matrix is
    still well defined (history columns are clamped to the last slot).
    """
    if u < 1:
        raise ValueError("horizon u must be >= 1")
    _check_position(m, n, series.slots_per_day, series.n_days)
    cfg = config.with_horizon(u)
    days, slots = matrix_indices(m, n, series.slots_per_day, cfg)
    values = series.values[days[0], slots[0]]
    return InputMatrix(values, _target(series, m, n + u - 1), (series.segment_id, m, n))


def build_vector_1d(series: CongestionSeries, m: int, n: int, config: FoldingConfig) -> np.ndarray:
    _check_position(m, n, series.slots_per_day, series.n_days)
    days, slots = vector_indices(m, n, series.slots_per_day, config)
    return series.values[days[0], slots[0]]


def flatten_matrix(matrix) -> np.ndarray:
    """Row-major flattening starting from the oldest day (last row) and ending with row 0."""
    values = matrix.values if isinstance(matrix, InputMatrix) else np.asarray(matrix)
    return values[::-1].reshape(-1)


def unflatten_vector(vector, shape) -> np.ndarray:
    return np.asarray(vector).reshape(shape)[::-1]


def eligible_positions(n_days: int, n_slots: int, u: int = 1, days: Optional[Iterable[int]] = None):
    """All (m, n) target origins: m >= 1 and the target slot n+u-1 inside the day."""
    day_list = range(1, n_days) if days is None else [m for m in days if 1 <= m < n_days]
    day_arr = np.asarray(list(day_list), dtype=np.int64)
    n_valid = n_slots - u + 1
    if n_valid <= 0 or day_arr.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    m = np.repeat(day_arr, n_valid)
    n = np.tile(np.arange(n_valid, dtype=np.int64), day_arr.size)
    return m, n


@dataclass(frozen=True, eq=False)
class InstanceSet:
    """Batched training/evaluation instances for one segment."""

    matrices: np.ndarray  # (K, d+1, 2t)
    vectors: np.ndarray  # (K, t+d)
    targets: np.ndarray  # (K,)
    days: np.ndarray  # target day m
    slots: np.ndarray  # origin slot n (target slot is n+u-1)
    segment_id: str
    config: FoldingConfig

    def __len__(self):
        return self.targets.shape[0]

    @property
    def target_slots(self) -> np.ndarray:
        return self.slots + self.config.u - 1

    def flat_matrices(self) -> np.ndarray:
        return self.matrices[:, ::-1, :].reshape(len(self), -1)


def build_instances(series: CongestionSeries, config: FoldingConfig,
                    days: Optional[Iterable[int]] = None, values: Optional[np.ndarray] = None) -> InstanceSet:
    """Instances for every eligible (m, n) whose target day is in `days`.

    `values` substitutes the grid (e.g. a normalised copy) while keeping the
    series' shape and identity.
    """
    grid = series.values if values is None else np.asarray(values)
    if grid.shape != series.values.shape:
        raise ValueError("substitute values must match the series grid")
    m, n = eligible_positions(series.n_days, series.slots_per_day, config.u, days)
    N = series.slots_per_day
    if m.size:
        md, ms = matrix_indices(m, n, N, config)
        vd, vs = vector_indices(m, n, N, config)
        matrices = grid[md, ms]
        vectors = grid[vd, vs]
        targets = grid[m, n + config.u - 1]
    else:
        d1, w = config.shape
        matrices = np.empty((0, d1, w))
        vectors = np.empty((0, config.vector_length))
        targets = np.empty(0)
    return InstanceSet(matrices, vectors, targets, m, n, series.segment_id, config)


def write_instances_csv(path, instances: InstanceSet) -> None:
    """Dump flattened matrices as `segment_id,day,slot,target,f0..f{K-1}`."""
    flat = instances.flat_matrices()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "day", "slot", "target"] + [f"f{i}" for i in range(flat.shape[1])])
        for k in range(len(instances)):
            w.writerow([instances.segment_id, int(instances.days[k]), int(instances.slots[k]),
                        repr(float(instances.targets[k]))] + [repr(float(v)) for v in flat[k]])

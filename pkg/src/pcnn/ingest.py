"""Vehicle passage records and aggregated travel times -> per-segment congestion series.

Records of the same vehicle at two different cameras form a traversal of the
segment "camA->camB". Traversals are assigned to the (day, slot) holding
their exit time, averaged per slot, gap-filled along the day, and converted to
congestion levels against a per-segment free-flow baseline.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
import os
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .domain import (
    CongestionSeries,
    compute_congestion_level,
    estimate_baseline_travel_time,
    slots_per_day,
)

log = logging.getLogger(__name__)

VPR_HEADER = ("vehicle_id", "camera_id", "timestamp_utc")
AGGREGATED_HEADER = ("segment_id", "date", "slot_index", "avg_travel_time_s")
SERIES_HEADER = ("segment_id", "date", "slot_index", "congestion_level")


class DataFormatError(ValueError):
    """A malformed input row; `line` is 1-based and counts the header."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = f"{path or '<input>'}:{line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class PassageRecord:
    vehicle_id: str
    camera_id: str
    timestamp: float

    def __post_init__(self):
        if not self.timestamp > 0:
            raise ValueError(f"timestamp must be positive, got {self.timestamp!r}")


@dataclass(frozen=True)
class SegmentTraversal:
    segment_id: str
    enter_ts: float
    exit_ts: float

    def __post_init__(self):
        if not self.exit_ts > self.enter_ts:
            raise ValueError("a traversal must take positive time")

    @property
    def travel_time(self) -> float:
        return self.exit_ts - self.enter_ts


def segment_id_for(camera_from: str, camera_to: str) -> str:
    return f"{camera_from}->{camera_to}"


def pair_traversals(records: Iterable[PassageRecord], max_gap: float):
    """Pair consecutive sightings of each vehicle into segment traversals.

    Returns (traversals, dropped), where `dropped` counts consecutive pairs
    rejected because the cameras match, the gap exceeds `max_gap` or the two
    timestamps coincide. Output is sorted by (segment, exit time, enter time).
    """
    if not max_gap > 0:
        raise ValueError("max_gap must be positive")
    by_vehicle = defaultdict(list)
    for r in records:
        by_vehicle[r.vehicle_id].append(r)
    traversals = []
    dropped = 0
    for vehicle in sorted(by_vehicle):
        seq = sorted(by_vehicle[vehicle], key=lambda r: (r.timestamp, r.camera_id))
        for a, b in zip(seq, seq[1:]):
            gap = b.timestamp - a.timestamp
            if a.camera_id == b.camera_id or gap <= 0 or gap > max_gap:
                dropped += 1
                continue
            traversals.append(SegmentTraversal(segment_id_for(a.camera_id, b.camera_id), a.timestamp, b.timestamp))
    traversals.sort(key=lambda tr: (tr.segment_id, tr.exit_ts, tr.enter_ts))
    return traversals, dropped


def _is_workday(day: dt.date) -> bool:
    return day.weekday() < 5


@dataclass
class _SlotAccumulator:
    """Per-segment slot sums; `math.fsum` keeps the means independent of input order."""

    values: dict = field(default_factory=lambda: defaultdict(list))

    def add(self, day: dt.date, slot: int, travel_time: float):
        self.values[(day, slot)].append(travel_time)

    def means(self):
        return {k: math.fsum(v) / len(v) for k, v in self.values.items()}


def _locate(ts: float, slot_minutes: int, start_hour: int, end_hour: int, utc_offset_hours: float):
    """(date, slot) of a timestamp, or None when it falls outside the daily window."""
    moment = dt.datetime.fromtimestamp(ts, tz=dt.timezone.utc) + dt.timedelta(hours=utc_offset_hours)
    minute = moment.hour * 60 + moment.minute + moment.second / 60.0 + moment.microsecond / 6e7
    if not start_hour * 60 <= minute < end_hour * 60:
        return None
    return moment.date(), int((minute - start_hour * 60) // slot_minutes)


def _fill_day(row: np.ndarray) -> np.ndarray:
    """Linear interpolation over missing slots; edges copy the nearest observation."""
    ok = np.isfinite(row)
    if ok.all() or not ok.any():
        return row
    idx = np.arange(row.size)
    return np.interp(idx, idx[ok], row[ok])


def build_series(segment_id: str, slot_means: dict, dates: Sequence[dt.date], slot_minutes: int,
                 start_hour: int = 6, end_hour: int = 24, baseline_window=(22, 24)) -> Optional[CongestionSeries]:
    """Grid of slot-mean travel times -> CongestionSeries.

    `slot_means` maps (date, slot) to an average travel time. Missing slots are
    interpolated along their day; days without any observation take the
    slot-wise median of the other days. Returns None when the segment has no
    observation on any of `dates`.
    """
    n = slots_per_day(slot_minutes, start_hour, end_hour)
    row_of = {d: i for i, d in enumerate(dates)}
    grid = np.full((len(dates), n), np.nan)
    for (day, slot), v in slot_means.items():
        if day in row_of and 0 <= slot < n:
            grid[row_of[day], slot] = v
    observed = np.isfinite(grid)
    if not observed.any():
        return None

    hours = start_hour + (np.arange(n) * slot_minutes) // 60
    slot_hours = np.broadcast_to(hours, grid.shape)
    baseline = estimate_baseline_travel_time(grid[observed], slot_hours[observed], baseline_window)

    filled = np.array([_fill_day(r) for r in grid])
    empty_days = ~observed.any(axis=1)
    if empty_days.any():
        filled[empty_days] = np.median(filled[~empty_days], axis=0)
        log.warning("segment %s: %d day(s) without observations filled from slot medians",
                    segment_id, int(empty_days.sum()))
    values = compute_congestion_level(filled, baseline)
    return CongestionSeries(segment_id, slot_minutes, values, start_hour, end_hour, baseline,
                            tuple(d.isoformat() for d in dates))


def _day_list(days: Iterable[dt.date], workdays_only: bool):
    return sorted(d for d in set(days) if not workdays_only or _is_workday(d))


def aggregate_traversals(traversals: Iterable[SegmentTraversal], slot_minutes: int = 5, start_hour: int = 6,
                         end_hour: int = 24, workdays_only: bool = True, utc_offset_hours: float = 0.0,
                         baseline_window=(22, 24)) -> dict:
    """Traversals -> {segment_id: CongestionSeries} on a shared calendar of days.

    The calendar is every (work)day on which any segment saw a traversal inside
    the daily window, so all returned series have the same shape.
    """
    slots_per_day(slot_minutes, start_hour, end_hour)  # validates the slot size
    acc = defaultdict(_SlotAccumulator)
    for tr in traversals:
        loc = _locate(tr.exit_ts, slot_minutes, start_hour, end_hour, utc_offset_hours)
        if loc is None:
            continue
        acc[tr.segment_id].add(loc[0], loc[1], tr.travel_time)
    means = {seg: a.means() for seg, a in acc.items()}
    dates = _day_list((day for m in means.values() for day, _ in m), workdays_only)
    return _assemble(means, dates, slot_minutes, start_hour, end_hour, baseline_window)


def aggregate_rows(rows: Iterable[tuple], slot_minutes: int = 5, start_hour: int = 6, end_hour: int = 24,
                   workdays_only: bool = True, baseline_window=(22, 24)) -> dict:
    """Pre-aggregated (segment_id, date, slot_index, avg_travel_time_s) rows -> series.

    Repeated (segment, date, slot) rows are averaged.
    """
    slots_per_day(slot_minutes, start_hour, end_hour)
    acc = defaultdict(_SlotAccumulator)
    for seg, day, slot, tt in rows:
        if isinstance(day, str):
            day = dt.date.fromisoformat(day)
        acc[seg].add(day, int(slot), float(tt))
    means = {seg: a.means() for seg, a in acc.items()}
    dates = _day_list((day for m in means.values() for day, _ in m), workdays_only)
    return _assemble(means, dates, slot_minutes, start_hour, end_hour, baseline_window)


def _assemble(means, dates, slot_minutes, start_hour, end_hour, baseline_window):
    out = {}
    for seg in sorted(means):
        series = build_series(seg, means[seg], dates, slot_minutes, start_hour, end_hour, baseline_window)
        if series is None:
            log.warning("segment %s has no traversals inside the window; skipped", seg)
            continue
        out[seg] = series
    return out


# ---------------------------------------------------------------- CSV I/O

@dataclass
class ParseResult:
    items: list
    skipped: list = field(default_factory=list)  # (line, message) for lenient mode


def parse_timestamp(text: str) -> float:
    """Epoch seconds or ISO-8601 (naive times are taken as UTC)."""
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    moment = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=dt.timezone.utc)
    return moment.timestamp()


def _read_rows(path, header, parse_row, strict):
    result = ParseResult([])
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or tuple(c.strip() for c in first) != header:
            raise DataFormatError(f"expected header {','.join(header)}", 1, path)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                result.items.append(parse_row(row))
            except ValueError as exc:
                if strict:
                    raise DataFormatError(str(exc), line, path) from None
                result.skipped.append((line, str(exc)))
    return result


def read_vpr_csv(path, strict: bool = True) -> ParseResult:
    def parse(row):
        vid, cam, ts = (c.strip() for c in row)
        if not vid or not cam:
            raise ValueError("empty vehicle or camera id")
        return PassageRecord(vid, cam, parse_timestamp(ts))
    return _read_rows(path, VPR_HEADER, parse, strict)


def read_aggregated_csv(path, strict: bool = True) -> ParseResult:
    def parse(row):
        seg, day, slot, tt = (c.strip() for c in row)
        tt = float(tt)
        if not (math.isfinite(tt) and tt > 0):
            raise ValueError(f"travel time must be positive, got {tt}")
        slot = int(slot)
        if slot < 0:
            raise ValueError("negative slot index")
        return seg, dt.date.fromisoformat(day), slot, tt
    return _read_rows(path, AGGREGATED_HEADER, parse, strict)


def atomic_write_text(path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def series_csv_text(series_list: Sequence[CongestionSeries]) -> str:
    lines = [",".join(SERIES_HEADER)]
    for s in series_list:
        labels = s.date_labels()
        for m in range(s.n_days):
            for n in range(s.slots_per_day):
                lines.append(f"{s.segment_id},{labels[m]},{n},{float(s.values[m, n])!r}")
    return "\n".join(lines) + "\n"


def sidecar_path(path) -> str:
    return os.fspath(path) + ".meta.json"


def write_series_csv(path, series_list: Sequence[CongestionSeries], extra_meta: Optional[dict] = None) -> None:
    """Series CSV plus a `.meta.json` sidecar with slot size, window and baselines."""
    series_list = list(series_list)
    if not series_list:
        raise ValueError("nothing to write")
    first = series_list[0]
    meta = {
        "slot_minutes": first.slot_minutes,
        "start_hour": first.start_hour,
        "end_hour": first.end_hour,
        "segments": {s.segment_id: {"baseline_travel_time": s.baseline_travel_time, "n_days": s.n_days}
                     for s in series_list},
    }
    if extra_meta:
        meta.update(extra_meta)
    atomic_write_text(path, series_csv_text(series_list))
    atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_series_csv(path, slot_minutes: Optional[int] = None, start_hour: Optional[int] = None,
                    end_hour: Optional[int] = None, strict: bool = True) -> list:
    """Series CSV -> list of CongestionSeries (ordered by first appearance).

    Slot size and hour window come from the sidecar when present; arguments
    override it. Without either, a 6:00-24:00 window is assumed and the slot
    size is inferred from the number of slots per day.
    """
    meta = {}
    if os.path.exists(sidecar_path(path)):
        with open(sidecar_path(path)) as fh:
            meta = json.load(fh)
    start_hour = start_hour if start_hour is not None else meta.get("start_hour", 6)
    end_hour = end_hour if end_hour is not None else meta.get("end_hour", 24)
    slot_minutes = slot_minutes if slot_minutes is not None else meta.get("slot_minutes")

    def parse(row):
        seg, day, slot, c = (x.strip() for x in row)
        c = float(c)
        if not (math.isfinite(c) and c >= 0):
            raise ValueError(f"congestion level must be finite and >= 0, got {c}")
        slot = int(slot)
        if slot < 0:
            raise ValueError("negative slot index")
        return seg, day, slot, c

    rows = _read_rows(path, SERIES_HEADER, parse, strict).items
    grids = {}
    for seg, day, slot, c in rows:
        grids.setdefault(seg, {}).setdefault(day, {})[slot] = c
    seg_meta = meta.get("segments", {})
    out = []
    for seg, days in grids.items():
        labels = list(days)
        n_slots = 1 + max(s for d in days.values() for s in d)
        if slot_minutes is None:
            slot_minutes = (end_hour - start_hour) * 60 // n_slots
        n = slots_per_day(slot_minutes, start_hour, end_hour)
        grid = np.full((len(labels), n), np.nan)
        for i, day in enumerate(labels):
            for s, c in days[day].items():
                if s >= n:
                    raise DataFormatError(f"segment {seg}: slot {s} outside a day of {n} slots", path=path)
                grid[i, s] = c
        if np.isnan(grid).any():
            raise DataFormatError(f"segment {seg}: series grid is not rectangular", path=path)
        baseline = seg_meta.get(seg, {}).get("baseline_travel_time")
        out.append(CongestionSeries(seg, slot_minutes, grid, start_hour, end_hour, baseline, tuple(labels)))
    return out

import datetime as dt
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcnn.domain import CongestionSeries
from pcnn.ingest import (
    DataFormatError,
    PassageRecord,
    SegmentTraversal,
    aggregate_rows,
    aggregate_traversals,
    build_series,
    pair_traversals,
    parse_timestamp,
    read_aggregated_csv,
    read_series_csv,
    read_vpr_csv,
    write_series_csv,
)

MONDAY = 1704067200.0  # 2024-01-01 00:00 UTC


def at(day, hour, minute=0, second=0):
    return MONDAY + day * 86400 + hour * 3600 + minute * 60 + second


def test_pair_examples():
    recs = [PassageRecord("A", "cam1", 1000.0), PassageRecord("A", "cam2", 1100.0)]
    trs, dropped = pair_traversals(recs, 600)
    assert len(trs) == 1 and trs[0].travel_time == 100 and trs[0].segment_id == "cam1->cam2"
    assert dropped == 0
    far = [PassageRecord("A", "cam1", 1000.0), PassageRecord("A", "cam2", 11000.0)]
    assert pair_traversals(far, 600) == ([], 1)
    assert pair_traversals([], 600) == ([], 0)


def test_pair_drops_same_camera_and_pairs_chains():
    recs = [PassageRecord("B", "c1", 10.0), PassageRecord("B", "c1", 20.0), PassageRecord("B", "c2", 50.0),
            PassageRecord("B", "c3", 80.0)]
    trs, dropped = pair_traversals(recs, 600)
    assert [(t.segment_id, t.travel_time) for t in trs] == [("c1->c2", 30.0), ("c2->c3", 30.0)]
    assert dropped == 1


def test_pair_rejects_bad_gap():
    with pytest.raises(ValueError):
        pair_traversals([], 0)


def test_record_validation():
    with pytest.raises(ValueError):
        PassageRecord("A", "c", 0.0)
    with pytest.raises(ValueError):
        SegmentTraversal("s", 10.0, 10.0)


@settings(max_examples=30, deadline=None)
@given(st.randoms(use_true_random=False))
def test_pairing_and_aggregation_are_order_invariant(rnd):
    rng = np.random.default_rng(rnd.randint(0, 2**31))
    recs = []
    for v in range(30):
        t = at(int(rng.integers(0, 3)), int(rng.integers(6, 23)), int(rng.integers(0, 60)))
        for cam in rng.permutation(4)[:3]:
            recs.append(PassageRecord(f"v{v}", f"c{cam}", t))
            t += float(rng.integers(30, 300))
    trs, dropped = pair_traversals(recs, 600)
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    trs2, dropped2 = pair_traversals(shuffled, 600)
    assert trs == trs2 and dropped == dropped2
    a = aggregate_traversals(trs, 60)
    b = aggregate_traversals(list(reversed(trs)), 60)
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k].values, b[k].values)


def test_window_and_slot_count():
    trs = [SegmentTraversal("s", at(0, h) - 50, at(0, h) + 10) for h in range(6, 24)]
    out = aggregate_traversals(trs, 5)
    assert out["s"].values.shape == (1, 216)
    early = [SegmentTraversal("s", at(0, 5) - 50, at(0, 5, 30))]
    assert aggregate_traversals(early, 5) == {}


def test_single_traversal_twice_baseline_gives_one():
    # baseline slots in 22:00-24:00 at 30 s; one slot at 60 s
    trs = [SegmentTraversal("s", at(0, 22, 5 * k) - 30, at(0, 22, 5 * k)) for k in range(24)]
    trs.append(SegmentTraversal("s", at(0, 8, 2) - 60, at(0, 8, 2)))
    s = aggregate_traversals(trs, 5)["s"]
    assert s.baseline_travel_time == 30.0
    assert s.values[0, (8 - 6) * 12] == 1.0


def test_workday_filter():
    sat = 5
    trs = [SegmentTraversal("s", at(d, 12) - 40, at(d, 12)) for d in (0, 1, sat)]
    assert aggregate_traversals(trs, 60)["s"].n_days == 2
    assert aggregate_traversals(trs, 60, workdays_only=False)["s"].n_days == 3


def test_gap_fill_interpolates_within_day():
    means = {(dt.date(2024, 1, 1), 0): 30.0, (dt.date(2024, 1, 1), 4): 70.0,
             (dt.date(2024, 1, 1), 17): 30.0}
    s = build_series("s", means, [dt.date(2024, 1, 1)], 60)
    tt = s.baseline_travel_time * (1 + s.values[0])
    assert np.allclose(tt[:5], [30, 40, 50, 60, 70])


def test_empty_day_filled_from_median(caplog):
    d0, d1, d2 = (dt.date(2024, 1, k) for k in (1, 2, 3))
    means = {(d0, k): 40.0 for k in range(16)}
    means.update({(d1, k): 80.0 for k in range(16)})
    means.update({(d, k): 20.0 for d in (d0, d1) for k in (16, 17)})  # 22:00-24:00 baseline
    with caplog.at_level(logging.WARNING):
        s = build_series("s", means, [d0, d1, d2], 60)
    assert s.baseline_travel_time == 20.0
    assert np.allclose(s.values[:, 0], [1.0, 3.0, 2.0])
    assert "slot medians" in caplog.text


def test_segment_without_data_is_skipped(caplog):
    rows = [("a", "2024-01-01", 3, 40.0), ("b", "2024-01-06", 3, 40.0)]  # b only on a Saturday
    with caplog.at_level(logging.WARNING):
        out = aggregate_rows(rows, 60)
    assert list(out) == ["a"]
    assert "skipped" in caplog.text


def test_ten_minute_slots_are_weighted_means_of_five_minute_slots():
    rng = np.random.default_rng(0)
    trs = []
    for k in range(216):
        hour, minute = divmod(6 * 60 + 5 * k, 60)
        base = 20.0 if hour >= 22 else 40.0
        for _ in range(int(rng.integers(1, 4))):
            exit_ts = at(0, hour, minute, int(rng.integers(0, 300)))
            trs.append(SegmentTraversal("s", exit_ts - base - rng.uniform(0, 30), exit_ts))
    counts5 = np.zeros(216)
    sums5 = np.zeros(216)
    for tr in trs:
        moment = dt.datetime.fromtimestamp(tr.exit_ts, tz=dt.timezone.utc)
        k = ((moment.hour - 6) * 60 + moment.minute) // 5
        counts5[k] += 1
        sums5[k] += tr.travel_time
    s10 = aggregate_traversals(trs, 10)["s"]
    tt10 = s10.baseline_travel_time * (1 + s10.values[0])
    expect = (sums5[0::2] + sums5[1::2]) / (counts5[0::2] + counts5[1::2])
    positive = s10.values[0] > 0
    assert positive.sum() > 80
    assert np.allclose(tt10[positive], expect[positive], rtol=1e-12)


def test_parse_timestamp():
    assert parse_timestamp("1704067200") == MONDAY
    assert parse_timestamp("2024-01-01T00:00:00Z") == MONDAY
    assert parse_timestamp("2024-01-01T08:00:00+08:00") == MONDAY
    assert parse_timestamp("2024-01-01 00:00:00") == MONDAY


def test_read_vpr_strict_and_lenient(tmp_path):
    path = tmp_path / "vpr.csv"
    path.write_text("vehicle_id,camera_id,timestamp_utc\nA,c1,1704067200\nA,c2,not-a-time\n\nB,c1,2024-01-01T00:01:00Z\n")
    with pytest.raises(DataFormatError) as err:
        read_vpr_csv(path)
    assert err.value.line == 3
    res = read_vpr_csv(path, strict=False)
    assert len(res.items) == 2 and res.skipped[0][0] == 3


def test_read_rejects_wrong_header(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(DataFormatError) as err:
        read_vpr_csv(path)
    assert err.value.line == 1


def test_read_aggregated(tmp_path):
    path = tmp_path / "agg.csv"
    path.write_text("segment_id,date,slot_index,avg_travel_time_s\ns,2024-01-01,0,30\ns,2024-01-01,1,-4\n")
    with pytest.raises(DataFormatError):
        read_aggregated_csv(path)
    res = read_aggregated_csv(path, strict=False)
    assert res.items == [("s", dt.date(2024, 1, 1), 0, 30.0)]


def test_series_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    a = CongestionSeries("a", 30, rng.uniform(0, 4, (3, 36)), baseline_travel_time=31.5,
                         dates=("2024-01-01", "2024-01-02", "2024-01-03"))
    b = CongestionSeries("b", 30, rng.uniform(0, 4, (3, 36)), dates=a.dates)
    path = tmp_path / "series.csv"
    write_series_csv(path, [a, b], {"note": "x"})
    back = read_series_csv(path)
    assert [s.segment_id for s in back] == ["a", "b"]
    assert np.array_equal(back[0].values, a.values) and np.array_equal(back[1].values, b.values)
    assert back[0].baseline_travel_time == 31.5 and back[0].slot_minutes == 30
    assert back[0].dates == a.dates


def test_series_csv_without_sidecar_infers_slot_size(tmp_path):
    path = tmp_path / "s.csv"
    lines = ["segment_id,date,slot_index,congestion_level"] + [f"s,d0,{k},0.5" for k in range(18)]
    path.write_text("\n".join(lines) + "\n")
    s = read_series_csv(path)[0]
    assert s.slot_minutes == 60 and s.values.shape == (1, 18)


def test_series_csv_rejects_ragged(tmp_path):
    path = tmp_path / "s.csv"
    lines = ["segment_id,date,slot_index,congestion_level"] + [f"s,d0,{k},0.5" for k in range(18)]
    lines += [f"s,d1,{k},0.5" for k in range(17)]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError):
        read_series_csv(path)

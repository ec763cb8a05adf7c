import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcnn.domain import (
    CongestionSeries,
    ConditionGroup,
    DomainError,
    InvalidBaselineError,
    InvalidParamsError,
    NormalizationParams,
    SlotIndex,
    classify_condition,
    classify_conditions,
    coarsen_series,
    compute_congestion_level,
    denormalize,
    estimate_baseline_travel_time,
    normalize,
    slots_per_day,
)

finite = st.floats(0, 1e6, allow_nan=False)
positive = st.floats(1e-3, 1e6, allow_nan=False)


@pytest.mark.parametrize("t,base,expected", [(30, 30, 0.0), (60, 30, 1.0), (20, 30, 0.0)])
def test_congestion_examples(t, base, expected):
    assert compute_congestion_level(t, base) == expected


@pytest.mark.parametrize("base", [0, -1.0])
def test_congestion_rejects_bad_baseline(base):
    with pytest.raises(InvalidBaselineError):
        compute_congestion_level(10.0, base)


def test_congestion_rejects_negative_time():
    with pytest.raises(DomainError):
        compute_congestion_level(-1.0, 10.0)


def test_congestion_vectorised():
    out = compute_congestion_level(np.array([10.0, 20.0, 40.0]), 20.0)
    assert np.array_equal(out, [0.0, 0.0, 1.0])


@given(finite, finite, positive)
def test_congestion_nonnegative_and_monotone(a, b, base):
    lo, hi = sorted((a, b))
    c_lo = compute_congestion_level(lo, base)
    c_hi = compute_congestion_level(hi, base)
    assert 0.0 <= c_lo <= c_hi


@pytest.mark.parametrize("c,group", [(0.5, ConditionGroup.NORMAL), (2.0, ConditionGroup.LIGHT),
                                     (4.0, ConditionGroup.HEAVY), (0.0, ConditionGroup.NORMAL),
                                     (1.0, ConditionGroup.NORMAL), (3.0, ConditionGroup.LIGHT)])
def test_classify_examples_and_boundaries(c, group):
    assert classify_condition(c) is group


@pytest.mark.parametrize("c", [-0.1, float("nan")])
def test_classify_rejects_invalid(c):
    with pytest.raises(DomainError):
        classify_condition(c)


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=50))
def test_classify_vectorised_agrees(values):
    groups = classify_conditions(values)
    assert list(groups) == [classify_condition(v) for v in values]


def test_normalize_examples():
    p = NormalizationParams(2.0, 6.0)
    assert normalize(2.0, p) == 0.0
    assert normalize(6.0, p) == 1.0
    x = 0.37 * p.span + p.min
    assert abs(denormalize(normalize(x, p), p) - x) <= 1e-12
    assert normalize(-5.0, p) == 0.0 and normalize(100.0, p) == 1.0


def test_normalize_degenerate_range_maps_to_zero():
    p = NormalizationParams(3.0, 3.0)
    assert np.array_equal(normalize(np.array([1.0, 3.0, 7.0]), p), [0.0, 0.0, 0.0])


def test_invalid_params():
    with pytest.raises(InvalidParamsError):
        NormalizationParams(2.0, 1.0)
    with pytest.raises(InvalidParamsError):
        NormalizationParams(0.0, float("inf"))


@given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.floats(0, 1))
def test_normalize_round_trip(lo, span, frac):
    p = NormalizationParams(lo, lo + span)
    x = p.min + frac * p.span
    x = min(max(x, p.min), p.max)
    assert abs(denormalize(normalize(x, p), p) - x) <= 1e-12 * max(1.0, abs(lo) + span)
    assert 0.0 <= normalize(x, p) <= 1.0


def test_slot_index():
    assert SlotIndex(2, 5, 216).flat == 437
    with pytest.raises(IndexError):
        SlotIndex(0, 216, 216)
    with pytest.raises(IndexError):
        SlotIndex(-1, 0, 216)


def test_slots_per_day():
    assert slots_per_day(5) == 216
    assert slots_per_day(60) == 18
    with pytest.raises(ValueError):
        slots_per_day(7)


def test_series_validation():
    with pytest.raises(ValueError):
        CongestionSeries("x", 60, np.zeros((2, 17)))
    with pytest.raises(DomainError):
        CongestionSeries("x", 60, -np.ones((2, 18)))
    s = CongestionSeries("x", 60, np.ones((2, 18)), dates=["2024-01-01", "2024-01-02"])
    assert s.n_days == 2 and s.slots_per_day == 18
    with pytest.raises(ValueError):
        s.values[0, 0] = 3.0  # frozen grid


def test_series_hours_and_labels():
    s = CongestionSeries("x", 30, np.zeros((2, 36)))
    assert list(s.hour_of_slot([0, 1, 2, 35])) == [6, 6, 7, 23]
    assert s.date_labels() == ("day000", "day001")


def test_coarsen_averages_pairs():
    vals = np.arange(2 * 216, dtype=float).reshape(2, 216)
    s = CongestionSeries("x", 5, vals)
    c = coarsen_series(s, 10)
    assert c.slots_per_day == 108
    assert c.values[1, 3] == (vals[1, 6] + vals[1, 7]) / 2
    with pytest.raises(ValueError):
        coarsen_series(c, 15)


def test_congested_fraction():
    s = CongestionSeries("x", 60, np.array([[0.0] * 9 + [2.0] * 9]))
    assert s.congested_fraction() == 0.5


def test_baseline_from_window_and_fallback():
    hours = np.array([6, 7, 22, 22, 23])
    avgs = np.array([50.0, 80.0, 30.0, 34.0, 32.0])
    assert estimate_baseline_travel_time(avgs, hours) == 32.0
    assert estimate_baseline_travel_time(avgs[:2], hours[:2]) == np.percentile([50.0, 80.0], 5)
    with pytest.raises(InvalidBaselineError):
        estimate_baseline_travel_time([np.nan], [22])

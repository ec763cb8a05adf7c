import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcnn.ingest import read_series_csv
from pcnn.synth import (
    DEFAULT_PEAKS,
    SynthConfig,
    base_profile,
    benchmark_seeds,
    calendar,
    generate,
    make_benchmark,
)

QUIET = dict(noise_sigma=0.0, relative_noise_sigma=0.0, incident_rate=0.0, peak_jitter_minutes=0.0)


def test_default_shape_and_peaks():
    s = generate(SynthConfig())
    assert s.values.shape == (30, 216) and s.values.size == 6480
    assert s.dates[0] == "2024-01-01" and s.dates[5] == "2024-01-08"  # weekends skipped
    prof = base_profile(SynthConfig())
    hours = 6 + (np.arange(216) + 0.5) / 12
    morning = hours[np.argmax(np.where(hours < 12, prof, 0))]
    evening = hours[np.argmax(np.where(hours > 12, prof, 0))]
    assert 7.5 <= morning <= 9.0 and 17.0 <= evening <= 18.0


def test_identical_days_without_randomness():
    s = generate(SynthConfig(day_sigma=0.0, day_ar=0.0, **QUIET))
    assert np.all(s.values == s.values[0])
    assert np.array_equal(s.values[0], np.maximum(base_profile(SynthConfig()), 0))


def test_zero_amplitudes_give_zero_series():
    cfg = SynthConfig(peaks=tuple((c, w, 0.0) for c, w, _ in DEFAULT_PEAKS), floor=0.0, **QUIET)
    assert np.all(generate(cfg).values == 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_congested_fraction_in_band(seed):
    assert 0.25 <= generate(SynthConfig(seed=seed)).congested_fraction() <= 0.45


def test_mean_congested_fraction_near_target():
    fr = [generate(SynthConfig(seed=s)).congested_fraction() for s in range(20)]
    assert abs(np.mean(fr) - 0.36) < 0.02


def test_adjacent_days_more_alike_than_a_week_apart():
    s = generate(SynthConfig(days=400, day_ar=0.8, seed=1))
    daily = s.values.mean(axis=1)
    lag1 = np.corrcoef(daily[:-1], daily[1:])[0, 1]
    lag7 = np.corrcoef(daily[:-7], daily[7:])[0, 1]
    assert lag1 > lag7 + 0.2


def test_day_lag_autocorrelation_is_one_without_noise():
    s = generate(SynthConfig(**QUIET))
    for i in range(s.n_days - 1):
        assert np.corrcoef(s.values[i], s.values[i + 1])[0, 1] == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([5, 10, 30, 60]), st.floats(0, 2), st.floats(0, 1))
def test_non_negative_and_reproducible(seed, minutes, noise, rate):
    cfg = SynthConfig(seed=seed, slot_minutes=minutes, noise_sigma=noise, incident_rate=rate, days=8)
    a, b = generate(cfg), generate(cfg)
    assert np.all(a.values >= 0)
    assert np.array_equal(a.values, b.values)


def test_segments_and_weekends():
    segs = generate(SynthConfig(segments=3, days=6))
    assert [s.segment_id for s in segs] == ["synth-000", "synth-001", "synth-002"]
    assert not np.array_equal(segs[0].values, segs[1].values)
    labels, weekend = calendar(SynthConfig(days=7, include_weekends=True))
    assert labels[5] == "2024-01-06" and list(weekend) == [False] * 5 + [True] * 2


@pytest.mark.parametrize("bad", [dict(day_ar=1.0), dict(noise_sigma=-1.0), dict(peaks=((8.0, 0.0, 1.0),)),
                                 dict(days=0), dict(slot_minutes=7), dict(incident_decay_minutes=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


def test_config_round_trip():
    cfg = SynthConfig(seed=4, peaks=((9.0, 1.0, 2.0),))
    assert SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"sigma": 1.0})


def test_benchmark_files_are_deterministic(tmp_path):
    a = make_benchmark(SynthConfig(seed=2), out_dir=tmp_path / "a")
    make_benchmark(SynthConfig(seed=2), out_dir=tmp_path / "b")
    csv_a = (tmp_path / "a" / "series.csv").read_bytes()
    assert csv_a == (tmp_path / "b" / "series.csv").read_bytes()
    assert a.split == (range(0, 20), range(20, 25), range(25, 30))
    meta = json.loads((tmp_path / "a" / "series.csv.meta.json").read_text())
    assert meta["synth_config"]["seed"] == 2 and meta["split_days"] == [20, 5, 5]
    back = read_series_csv(tmp_path / "a" / "series.csv")[0]
    assert np.array_equal(back.values, a.series[0].values)
    with pytest.raises(ValueError):
        make_benchmark(SynthConfig(days=10))
    assert len(benchmark_seeds(SynthConfig(days=30), [0, 1])) == 2

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fold_matrix, fold_sources, fold_vector
from pcnn.domain import CongestionSeries
from pcnn.folding import (
    FoldingConfig,
    build_input_matrix,
    build_instances,
    build_multistep_matrix,
    build_vector_1d,
    eligible_positions,
    flatten_matrix,
    matrix_indices,
    unflatten_vector,
    write_instances_csv,
)


def ramp_series(days=12, minutes=60):
    """c[m, n] = 100 m + n makes every cell identifiable by its value."""
    n = (24 - 6) * 60 // minutes
    vals = 100.0 * np.arange(days)[:, None] + np.arange(n)[None, :]
    return CongestionSeries("ramp", minutes, vals)


def random_series(rng, days=12, minutes=60):
    n = (24 - 6) * 60 // minutes
    return CongestionSeries("rnd", minutes, rng.uniform(0, 5, size=(days, n)))


def test_default_shape():
    cfg = FoldingConfig()
    assert cfg.shape == (10, 12)
    assert cfg.vector_length == 15


@pytest.mark.parametrize("bad", [dict(d=0), dict(t=0), dict(u=0), dict(d=1.5)])
def test_config_rejects_non_positive(bad):
    with pytest.raises(ValueError):
        FoldingConfig(**bad)


def test_row0_is_mirrored_recent_window():
    s = ramp_series()
    mat = build_input_matrix(s, 5, 10, FoldingConfig(d=3, t=4)).values
    assert list(mat[0]) == [506, 507, 508, 509, 509, 508, 507, 506]


def test_history_rows_centred_on_target():
    s = ramp_series()
    mat = build_input_matrix(s, 5, 10, FoldingConfig(d=3, t=4)).values
    # row i covers slots n-t .. n+t-1 of day m-i
    assert list(mat[1]) == [406 + k for k in range(8)]
    assert list(mat[3]) == [206 + k for k in range(8)]


def test_padding_at_day_start_and_end():
    s = ramp_series()
    cfg = FoldingConfig(d=2, t=4)
    early = build_input_matrix(s, 3, 2, cfg).values
    assert list(early[0]) == [300, 300, 300, 301, 301, 300, 300, 300]
    assert list(early[1]) == [200, 200, 200, 201, 202, 203, 204, 205]
    late = build_multistep_matrix(s, 3, 17, 1, cfg).values
    assert list(late[1]) == [213, 214, 215, 216, 217, 217, 217, 217]


def test_first_slot_uses_previous_day_end():
    s = ramp_series()
    mat = build_input_matrix(s, 4, 0, FoldingConfig(d=2, t=3)).values
    assert np.all(mat[0] == 317)


def test_padding_before_first_day():
    s = ramp_series()
    mat = build_input_matrix(s, 1, 5, FoldingConfig(d=4, t=2)).values
    assert list(mat[1]) == [3, 4, 5, 6]
    assert list(mat[2]) == list(mat[1])  # day -1 -> day 0
    assert list(mat[4]) == list(mat[1])


def test_multistep_recentres_history_only():
    s = ramp_series()
    cfg = FoldingConfig(d=2, t=3)
    one = build_multistep_matrix(s, 5, 8, 1, cfg)
    three = build_multistep_matrix(s, 5, 8, 3, cfg)
    assert np.array_equal(one.values[0], three.values[0])
    assert list(three.values[1]) == [407 + k for k in range(6)]
    assert three.target == 510.0


def test_multistep_target_past_day_end_is_nan():
    s = ramp_series()
    assert np.isnan(build_multistep_matrix(s, 5, 17, 2, FoldingConfig(d=2, t=3)).target)


@pytest.mark.parametrize("m,n", [(0, 0), (-1, 3), (2, 18), (12, 1)])
def test_invalid_positions(m, n):
    with pytest.raises(IndexError):
        build_input_matrix(ramp_series(), m, n, FoldingConfig(d=2, t=2))


def test_flatten_starts_with_oldest_row():
    mat = np.arange(12).reshape(3, 4)
    flat = flatten_matrix(mat)
    assert list(flat[:4]) == [8, 9, 10, 11]
    assert list(flat[-4:]) == [0, 1, 2, 3]
    assert np.array_equal(unflatten_vector(flat, (3, 4)), mat)


def test_vector_1d_layout():
    s = ramp_series()
    v = build_vector_1d(s, 5, 10, FoldingConfig(d=3, t=4))
    assert list(v) == [506, 507, 508, 509, 410, 310, 210]


def test_eligible_count_is_days_minus_one_times_slots():
    s = ramp_series(days=7)
    inst = build_instances(s, FoldingConfig(d=3, t=2))
    assert len(inst) == 6 * 18
    m, n = eligible_positions(7, 18, u=3)
    assert m.size == 6 * 16 and n.max() == 15


def test_instances_match_single_builders():
    rng = np.random.default_rng(3)
    s = random_series(rng)
    cfg = FoldingConfig(d=4, t=3, u=2)
    inst = build_instances(s, cfg, days=[2, 5])
    assert set(inst.days.tolist()) == {2, 5}
    for k in range(0, len(inst), 7):
        m, n = int(inst.days[k]), int(inst.slots[k])
        single = build_multistep_matrix(s, m, n, 2, cfg)
        assert np.array_equal(inst.matrices[k], single.values)
        assert inst.targets[k] == single.target
        assert np.array_equal(inst.flat_matrices()[k], flatten_matrix(single))


def test_substitute_values_must_match_shape():
    s = ramp_series()
    with pytest.raises(ValueError):
        build_instances(s, FoldingConfig(), values=np.zeros((2, 2)))


def test_write_instances_csv_round_trip(tmp_path):
    s = ramp_series(days=3)
    inst = build_instances(s, FoldingConfig(d=1, t=2), days=[1])
    path = tmp_path / "inst.csv"
    write_instances_csv(path, inst)
    rows = path.read_text().splitlines()
    assert rows[0].split(",")[:5] == ["segment_id", "day", "slot", "target", "f0"]
    assert len(rows) == 1 + len(inst)
    first = rows[1].split(",")
    assert [float(v) for v in first[4:]] == list(inst.flat_matrices()[0])


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 11), st.integers(0, 17), st.integers(1, 12), st.integers(1, 8), st.integers(1, 4),
       st.integers(0, 2**31 - 1))
def test_matches_brute_force(m, n, d, t, u, seed):
    s = random_series(np.random.default_rng(seed))
    cfg = FoldingConfig(d=d, t=t)
    got = build_multistep_matrix(s, m, n, u, cfg).values
    assert np.array_equal(got, fold_matrix(s.values, m, n, d, t, u))
    assert np.array_equal(build_vector_1d(s, m, n, cfg.with_horizon(u)), fold_vector(s.values, m, n, d, t, u))


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 11), st.integers(0, 17), st.integers(1, 12), st.integers(1, 8), st.integers(1, 4))
def test_never_reads_current_or_future_slots(m, n, d, t, u):
    days, slots = matrix_indices(m, n, 18, FoldingConfig(d=d, t=t, u=u))
    current = days[0] == m
    assert np.all(slots[0][current] < n)
    assert np.all(days[0] <= m)
    assert np.all(days[0, 1:] < m)
    assert set(zip(days[0].ravel().tolist(), slots[0].ravel().tolist())) == fold_sources(m, n, d, t, 18, u)

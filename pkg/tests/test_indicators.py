import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_panel
from harmony.exceptions import OrderingError, SchemaError, SizeError
from harmony.indicators import (
    CUConfig,
    IndicatorPanel,
    MinMaxNormalizer,
    NormState,
    TraceSchema,
    aggregate,
    chronological_split,
    load_trace,
    make_windows,
    minmax_fit_transform,
    parse_timestamp,
    time_features,
    write_trace,
)


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def schema_file(tmp_path):
    return write(tmp_path / "schema.txt", "qps.role = request\nqps.level = 1\ncpu.role = consumption\ncpu.level = 2\n")


class TestPanel:
    def test_role_partition(self):
        panel = make_panel(np.zeros((3, 4)), roles=["request", "consumption", "quality"], levels=[1, 2, 3])
        counts = panel.role_counts()
        assert sum(counts.values()) == panel.n_indicators == 3
        assert panel.max_level == 3

    def test_rejects_level_zero(self):
        with pytest.raises(SchemaError):
            make_panel(np.zeros((1, 3)), levels=[0])

    def test_rejects_uneven_stride(self):
        with pytest.raises(OrderingError):
            IndicatorPanel(np.zeros((1, 3)), ["a"], ["request"], [1], np.array([0, 600, 1300]))

    def test_cu_config_requires_positive(self):
        with pytest.raises(SchemaError):
            CUConfig([1.0, 0.0])


class TestLoadTrace:
    def test_three_column_csv(self, tmp_path, schema_file):
        trace = write(tmp_path / "t.csv", "timestamp,qps,cpu\n0,1,2\n600,3,4\n1200,5,6\n1800,7,8\n")
        panel = load_trace(trace, schema_file)
        assert (panel.n_indicators, panel.n_timestamps) == (2, 4)
        np.testing.assert_array_equal(panel.values[1], [2, 4, 6, 8])
        assert list(panel.levels) == [1, 2]

    def test_duplicate_timestamp(self, tmp_path, schema_file):
        trace = write(tmp_path / "t.csv", "timestamp,qps,cpu\n0,1,2\n0,3,4\n")
        with pytest.raises(OrderingError):
            load_trace(trace, schema_file)

    def test_level_zero_in_schema(self, tmp_path):
        with pytest.raises(SchemaError):
            TraceSchema.from_mapping({"qps.role": "request", "qps.level": "0"})

    def test_missing_column_is_named(self, tmp_path):
        schema = {"qps.role": "request", "mem.role": "consumption"}
        trace = write(tmp_path / "t.csv", "timestamp,qps\n0,1\n600,2\n")
        with pytest.raises(SchemaError, match="mem"):
            load_trace(trace, schema)

    @pytest.mark.parametrize("cell", ["", "abc", "nan"])
    def test_bad_value_rejected(self, tmp_path, schema_file, cell):
        trace = write(tmp_path / "t.csv", f"timestamp,qps,cpu\n0,1,2\n600,{cell},4\n")
        with pytest.raises(SchemaError):
            load_trace(trace, schema_file)

    def test_bad_timestamp_rejected(self, tmp_path, schema_file):
        trace = write(tmp_path / "t.csv", "timestamp,qps,cpu\nyesterday,1,2\n")
        with pytest.raises(SchemaError):
            load_trace(trace, schema_file)

    def test_iso_timestamps(self):
        assert parse_timestamp("1970-01-01T00:10:00") == 600
        assert parse_timestamp("1970-01-01T01:00:00+01:00") == 0

    def test_round_trip(self, tmp_path, schema_file):
        trace = write(tmp_path / "t.csv", "timestamp,qps,cpu\n0,1.5,2\n600,3,4.25\n")
        panel = load_trace(trace, schema_file)
        write_trace(panel, tmp_path / "out.csv")
        again = load_trace(tmp_path / "out.csv", schema_file)
        np.testing.assert_array_equal(again.values, panel.values)
        np.testing.assert_array_equal(again.timestamps, panel.timestamps)

    def test_default_levels_by_role(self):
        schema = TraceSchema.from_mapping({"a.role": "request", "b.role": "consumption", "c.role": "quality"})
        assert schema.levels == {"a": 1, "b": 2, "c": 3}

    def test_capacities_build_cu_config(self, tmp_path):
        schema = TraceSchema.from_mapping({"q.role": "request", "cpu.role": "consumption", "cpu.cu_capacity": "4"})
        panel = make_panel(np.ones((2, 3)), roles=["request", "consumption"], names=["q", "cpu"])
        np.testing.assert_array_equal(schema.cu_config(panel).capacities, [4.0])


class TestAggregate:
    def test_bucket_max(self):
        panel = make_panel([[0.2, 0.5, 0.3]])
        assert aggregate(panel, 1800).values.tolist() == [[0.5]]

    def test_equal_bucket_is_identity(self, rng):
        panel = make_panel(rng.random((2, 7)))
        out = aggregate(panel, 600)
        np.testing.assert_array_equal(out.values, panel.values)
        np.testing.assert_array_equal(out.timestamps, panel.timestamps)

    def test_trailing_partial_dropped(self, rng):
        out = aggregate(make_panel(rng.random((1, 7))), 1800)
        assert out.n_timestamps == 2
        assert out.stride == 1800

    def test_bucket_below_stride(self):
        with pytest.raises(ValueError):
            aggregate(make_panel(np.zeros((1, 4))), 300)


class TestMinMax:
    def test_examples(self):
        normed, state = minmax_fit_transform(make_panel([[0, 5, 10], [4, 4, 4]]), (0, 3))
        np.testing.assert_array_equal(normed.values, [[0, 0.5, 1], [0, 0, 0]])
        assert state.maximum[1] == state.minimum[1]

    def test_fits_on_train_segment(self):
        values = np.arange(20, dtype=float)[None]
        normed, state = minmax_fit_transform(make_panel(values))
        assert state.minimum[0] == 0 and state.maximum[0] == 13
        assert normed.values[0, -1] > 1

    @given(arrays(np.float64, (3, 6), elements=st.floats(-1e6, 1e6)))
    def test_round_trip(self, values):
        state = NormState(values.min(axis=1), values.max(axis=1))
        back = state.inverse_transform(state.transform(values))
        varying = state.span > 0
        np.testing.assert_allclose(back[varying], values[varying], rtol=1e-12, atol=1e-12 * np.abs(values).max())

    def test_sklearn_transformer(self, rng):
        x = rng.random((10, 3)) * 7
        scaler = MinMaxNormalizer().fit(x)
        np.testing.assert_allclose(scaler.inverse_transform(scaler.transform(x)), x)
        assert scaler.get_params() == {}


class TestSplit:
    def test_hundred(self):
        s = chronological_split(100)
        assert (s.train, s.test, s.validation) == ((0, 70), (70, 80), (80, 100))

    def test_ten(self):
        s = chronological_split(10)
        assert [hi - lo for lo, hi in (s.train, s.test, s.validation)] == [7, 1, 2]

    def test_too_short(self):
        with pytest.raises(SizeError):
            chronological_split(9)

    @given(st.integers(10, 5000))
    def test_partition(self, t):
        s = chronological_split(t)
        assert s.train[0] == 0 and s.train[1] == s.test[0] and s.test[1] == s.validation[0]
        assert s.validation[1] == t


class TestWindows:
    def test_ten_by_three(self):
        panel = make_panel(np.arange(20, dtype=float).reshape(2, 10))
        w = make_windows(panel, 3)
        # targets at indices 3..9 (seven windows)
        assert len(w) == 7
        np.testing.assert_array_equal(w.target_index, np.arange(3, 10))
        np.testing.assert_array_equal(w.targets[0], panel.values[:, 3])

    @settings(max_examples=30)
    @given(st.integers(60, 120), st.integers(1, 5))
    def test_alignment(self, t, t_in):
        values = np.random.default_rng(t).random((2, t))
        panel = make_panel(values)
        w = make_windows(panel, t_in, chronological_split(t))
        for i, target in enumerate(w.target_index):
            np.testing.assert_array_equal(w.inputs[i], values[:, target - t_in:target])
            np.testing.assert_array_equal(w.targets[i], values[:, target])

    def test_split_by_target(self):
        panel = make_panel(np.zeros((1, 100)))
        splits = chronological_split(100)
        w = make_windows(panel, 5, splits)
        for tag, target in zip(w.split, w.target_index):
            assert tag == splits.segment_of(int(target))
        for name in ("train", "test", "validation"):
            assert np.all(np.diff(w.subset(name).target_index) > 0)

    def test_t_in_limit(self):
        panel = make_panel(np.zeros((1, 1000)))
        splits = chronological_split(1000)
        make_windows(panel, 72, splits)
        with pytest.raises(SizeError):
            make_windows(panel, 100, splits)


class TestTimeFeatures:
    def test_midnight_monday(self):
        ts = int(dt.datetime(2024, 1, 1, tzinfo=dt.timezone.utc).timestamp())
        np.testing.assert_array_equal(time_features([ts])[:, 0], [0.0, 0.0, 0.0, 0.0])

    def test_half_past_noon(self):
        ts = int(dt.datetime(2024, 3, 15, 12, 30, tzinfo=dt.timezone.utc).timestamp())
        f = time_features([ts])[:, 0]
        assert f[0] == 0.5 and f[1] == 0.5

    @given(st.integers(0, 4_000_000_000))
    def test_matches_calendar(self, ts):
        d = dt.datetime.fromtimestamp(ts, dt.timezone.utc)
        expected = [d.minute / 60, d.hour / 24, d.weekday() / 7, (d.day - 1) / 31]
        f = time_features([ts])[:, 0]
        np.testing.assert_allclose(f, expected, rtol=0, atol=1e-15)
        assert np.all((f >= 0) & (f < 1))

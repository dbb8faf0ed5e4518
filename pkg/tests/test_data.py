import math
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irrcast.autodiff import Tensor
from irrcast.data import (
    FEATURE_NAMES,
    IrregularSeries,
    RevIN,
    WindowPair,
    drop_random,
    load_csv,
    make_windows,
    revin_denormalize,
    revin_normalize,
    save_csv,
    split_chronological,
    split_windows,
    synth_generate,
    time_features,
    window_time_features,
)
from irrcast.errors import (
    AllNullVariable,
    BadFractions,
    BadParams,
    DegenerateSpan,
    NonMonotonicTimestamps,
    ParseError,
    RateOutOfRange,
    SeriesTooShort,
    ShapeMismatch,
)


def hourly(n, n_vars=1, start=0.0):
    t = start + 3600.0 * np.arange(n)
    return IrregularSeries(t, np.arange(n * n_vars, dtype=float).reshape(n, n_vars))


def utc(*args):
    return datetime(*args, tzinfo=timezone.utc).timestamp()


class TestSeries:
    def test_rejects_unsorted(self):
        with pytest.raises(NonMonotonicTimestamps):
            IrregularSeries([0.0, 2.0, 1.0], [1.0, 2.0, 3.0])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            IrregularSeries([0.0, 1.0], [1.0, 2.0, 3.0])

    def test_default_names(self):
        assert hourly(3, 2).variable_names == ("x0", "x1")


class TestCsv:
    def write(self, tmp_path, text):
        path = tmp_path / "data.csv"
        path.write_text(text)
        return path

    def test_three_rows(self, tmp_path):
        path = self.write(tmp_path, "date,a\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,2\n2020-01-01 02:00:00,3\n")
        series = load_csv(path)
        assert len(series) == 3
        assert series.timestamps[1] - series.timestamps[0] == 3600.0

    def test_empty_cell_is_null(self, tmp_path):
        path = self.write(tmp_path, "date,a,b\n2020-01-01 00:00:00,1,\n2020-01-01 01:00:00,2,5\n")
        series = load_csv(path)
        assert np.isnan(series.values[0, 1])
        assert series.values[1, 1] == 5.0

    def test_duplicate_timestamp(self, tmp_path):
        path = self.write(tmp_path, "date,a\n2020-01-01 00:00:00,1\n2020-01-01 00:00:00,2\n")
        with pytest.raises(NonMonotonicTimestamps):
            load_csv(path)

    def test_parse_error_reports_row(self, tmp_path):
        path = self.write(tmp_path, "date,a\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,abc\n")
        with pytest.raises(ParseError) as err:
            load_csv(path)
        assert err.value.row == 3

    def test_column_selection(self, tmp_path):
        path = self.write(tmp_path, "date,a,b\n2020-01-01 00:00:00,1,2\n")
        assert load_csv(path, ["b"]).values[0, 0] == 2.0
        with pytest.raises(ParseError):
            load_csv(path, ["zz"])

    def test_round_trip(self, tmp_path):
        values = np.array([[1.25, np.nan], [-3.0, 0.1]])
        series = IrregularSeries([utc(2021, 5, 1), utc(2021, 5, 1, 2)], values, ("u", "v"))
        path = tmp_path / "out.csv"
        save_csv(series, path)
        back = load_csv(path)
        np.testing.assert_array_equal(back.timestamps, series.timestamps)
        np.testing.assert_array_equal(np.isnan(back.values), np.isnan(values))
        np.testing.assert_array_equal(np.nan_to_num(back.values), np.nan_to_num(values))


class TestDropRandom:
    def test_zero_rate_identity(self):
        s = hourly(20)
        assert drop_random(s, 0.0, 1) is s

    def test_forty_percent_of_hundred(self):
        assert len(drop_random(hourly(100), 0.4, 0)) == 60

    def test_deterministic(self):
        a = drop_random(hourly(50), 0.4, 7)
        b = drop_random(hourly(50), 0.4, 7)
        np.testing.assert_array_equal(a.timestamps, b.timestamps)

    def test_rate_out_of_range(self):
        with pytest.raises(RateOutOfRange):
            drop_random(hourly(10), 1.0, 0)

    @given(st.integers(3, 200), st.sampled_from([0.2, 0.4, 0.6]), st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_keeps_endpoints_and_values(self, n, rate, seed):
        s = hourly(n)
        d = drop_random(s, rate, seed)
        assert len(d) == n - math.floor(rate * n)
        assert d.timestamps[0] == s.timestamps[0] and d.timestamps[-1] == s.timestamps[-1]
        assert np.all(np.diff(d.timestamps) > 0)
        idx = np.searchsorted(s.timestamps, d.timestamps)
        np.testing.assert_array_equal(s.values[idx], d.values)


class TestWindows:
    def test_counts(self):
        assert len(make_windows(hourly(10), 4, 2, 6)) == 1
        assert len(make_windows(hourly(10), 4, 2, 1)) == 5

    def test_too_short(self):
        with pytest.raises(SeriesTooShort):
            make_windows(hourly(5), 4, 2)

    def test_irregular_windows_count_observations(self):
        dropped = drop_random(hourly(200), 0.4, 2)
        windows = make_windows(dropped, 12, 6)
        gaps = set()
        for w in windows:
            assert len(w.past_times) == 12 and len(w.future_times) == 6
            assert w.past_times[-1] < w.future_times[0]
            gaps.update(np.diff(w.times).tolist())
        assert len(gaps) > 1

    def test_features_cover_combined_window(self):
        w = make_windows(hourly(10), 4, 2)[0]
        rel = w.features[:, 0]
        assert rel[0] == 0.0 and rel[-1] == 1.0
        assert w.features.shape == (6, len(FEATURE_NAMES))

    def test_window_ordering_enforced(self):
        with pytest.raises(NonMonotonicTimestamps):
            WindowPair(
                np.array([0.0, 2.0]), np.zeros((2, 1)), np.zeros((2, 7)),
                np.array([1.0]), np.zeros((1, 1)), np.zeros((1, 7)),
            )


class TestSplit:
    def test_ratio(self):
        parts = split_chronological(hourly(100), (0.6, 0.2, 0.2))
        assert [len(p) for p in parts] == [60, 20, 20]

    def test_all_train(self):
        train, val, test = split_chronological(hourly(10), (1.0, 0.0, 0.0))
        assert len(train) == 10 and len(val) == 0 and len(test) == 0

    def test_bad_fractions(self):
        with pytest.raises(BadFractions):
            split_chronological(hourly(10), (0.5, 0.2, 0.2))

    @given(st.integers(5, 300), st.floats(0.1, 0.8), st.floats(0.0, 0.1))
    @settings(max_examples=50, deadline=None)
    def test_partition(self, n, f_train, f_val):
        s = hourly(n)
        parts = split_chronological(s, (f_train, f_val, 1.0 - f_train - f_val))
        np.testing.assert_array_equal(np.concatenate([p.timestamps for p in parts]), s.timestamps)
        non_empty = [p for p in parts if len(p)]
        for a, b in zip(non_empty, non_empty[1:]):
            assert a.timestamps[-1] < b.timestamps[0]

    def test_split_windows_targets_are_disjoint(self):
        s = hourly(120)
        train, val, test = split_windows(s, (0.7, 0.1, 0.2), 10, 4)
        train_targets = {t for w in train for t in w.future_times}
        test_targets = {t for w in test for t in w.future_times}
        assert train_targets.isdisjoint(test_targets)
        # test windows start their lookback inside the preceding split
        assert test[0].future_times[0] == s.timestamps[96]


class TestTimeFeatures:
    def test_relative_endpoints(self):
        assert time_features(10.0, (10.0, 20.0)).relative_time == 0.0
        assert time_features(20.0, (10.0, 20.0)).relative_time == 1.0

    def test_new_year_midnight(self):
        t = utc(2021, 1, 1)
        f = time_features(t, (t, t + 3600))
        assert f.month == -0.5
        assert f.day == -0.5
        assert f.hour == -0.5 and f.minute == -0.5

    def test_known_calendar(self):
        # 2016-07-01 was a Friday
        t = utc(2016, 7, 1, 23, 59)
        f = time_features(t, (t - 10, t + 10))
        assert f.weekday == pytest.approx(4 / 6 - 0.5)
        assert f.month == pytest.approx(6 / 11 - 0.5)
        assert f.hour == 0.5 and f.minute == 0.5

    def test_degenerate_span(self):
        with pytest.raises(DegenerateSpan):
            time_features(1.0, (1.0, 1.0))

    @given(st.floats(0, 3e9), st.floats(1.0, 1e7), st.floats(0, 1), st.floats(-1e6, 1e6))
    @settings(max_examples=100, deadline=None)
    def test_ranges_and_translation(self, start, width, frac, shift):
        t = start + frac * width
        feats = window_time_features(np.array([t]), start, start + width)[0]
        assert 0.0 <= feats[0] <= 1.0
        assert np.all((feats[2:] >= -0.5) & (feats[2:] <= 0.5))
        moved = window_time_features(np.array([t + shift]), start + shift, start + shift + width)[0]
        assert moved[0] == pytest.approx(feats[0], abs=1e-6)


class TestRevIN:
    def test_hand_example(self):
        out, _ = revin_normalize(np.array([[1.0], [3.0]]))
        np.testing.assert_allclose(out.data, [[-1.0], [1.0]])

    def test_constant_window(self):
        out, stats = revin_normalize(np.full((5, 2), 4.0))
        np.testing.assert_array_equal(out.data, 0.0)
        assert np.all(stats.std >= 1e-5)

    def test_denormalize_zero_is_mean(self, rng):
        x = rng.normal(size=(8, 3))
        _, stats = revin_normalize(x)
        np.testing.assert_allclose(revin_denormalize(np.zeros((2, 3)), stats).data, np.tile(x.mean(0), (2, 1)))

    def test_gain_two_round_trip(self, rng):
        x = rng.normal(size=(10, 2)) * 5 + 3
        out, stats = revin_normalize(x, gain=Tensor(np.full(2, 2.0)), bias=Tensor(np.array([0.5, -1.0])))
        np.testing.assert_allclose(revin_denormalize(out, stats).data, x, atol=1e-6)

    def test_all_null(self):
        with pytest.raises(AllNullVariable):
            revin_normalize(np.array([[1.0, np.nan], [2.0, np.nan]]))

    def test_denormalize_shape(self):
        _, stats = revin_normalize(np.ones((3, 2)))
        with pytest.raises(ShapeMismatch):
            revin_denormalize(np.zeros((3, 3)), stats)

    def test_nulls_ignored_and_zeroed(self):
        x = np.array([[1.0], [np.nan], [3.0]])
        out, stats = revin_normalize(x)
        np.testing.assert_allclose(out.data[:, 0], [-1.0, 0.0, 1.0])
        assert stats.mean[0, 0] == 2.0

    @given(
        st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=30),
        st.floats(0.5, 3.0),
        st.floats(-2.0, 2.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_round_trip_and_centering(self, values, gain, bias):
        x = np.array(values)[:, None]
        if np.ptp(x) < 1e-3:
            x[0, 0] += 1.0
        layer = RevIN(1)
        layer.gain.data[:] = gain
        layer.bias.data[:] = bias
        out, stats = layer.normalize(x)
        np.testing.assert_allclose(layer.denormalize(out, stats).data, x, atol=1e-6 * max(1.0, np.abs(x).max()))
        assert abs((out.data[:, 0] - bias).mean() / gain) < 1e-7

    def test_batched_statistics_per_window(self, rng):
        x = rng.normal(size=(4, 6, 2)) * np.array([1.0, 10.0])
        out, stats = revin_normalize(x)
        assert stats.mean.shape == (4, 1, 2)
        assert np.max(np.abs(out.data.mean(axis=1))) < 1e-7


class TestSynthetic:
    def test_zero_amplitude_is_constant(self):
        s = synth_generate("sine_mixture", {"amplitudes": 0.0, "trend": 0.0, "noise": 0.0}, 50, 0)
        assert np.ptp(s.values) == 0.0

    def test_seeded(self):
        a = synth_generate("ar_process", {}, 100, 5)
        b = synth_generate("ar_process", {}, 100, 5)
        np.testing.assert_array_equal(a.values, b.values)

    def test_period_24(self):
        s = synth_generate("sine_mixture", {"periods": [24.0], "trend": 0.0, "noise": 0.0}, 200, 1)
        np.testing.assert_allclose(s.values[24:], s.values[:-24], atol=1e-9)

    def test_hourly_grid(self):
        s = synth_generate("trend_season", {}, 30, 0)
        assert np.all(np.diff(s.timestamps) == 3600.0)

    @pytest.mark.parametrize(
        "kind, params",
        [("sine_mixture", {"periods": [-1.0]}), ("ar_process", {"coefficients": [0.9, 0.5]}), ("nope", {})],
    )
    def test_bad_params(self, kind, params):
        with pytest.raises(BadParams):
            synth_generate(kind, params, 50, 0)

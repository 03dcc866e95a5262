from datetime import date, datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pastaflow.errors import (
    DataError,
    HeaderError,
    HistoryError,
    NegativeValueError,
    NonMonotonicError,
    RaggedRowError,
    ScalerError,
)
from pastaflow.grid_data import (
    FlowSequence,
    FragmentSpec,
    Sample,
    Scaler,
    build_input,
    build_samples,
    external_dimension,
    external_features,
    generate_synthetic,
    load_flow_sequence,
    load_holidays,
    save_flow_sequence,
)
from pastaflow.spatial_stats import quadrants

MONDAY = datetime(2021, 4, 5)


def tiny_sequence(frames=None, n=2, m=2, interval=60):
    if frames is None:
        frames = [np.array([[0.0, 1.0], [2.0, 3.0]]), np.array([[4.0, 5.0], [6.0, 7.5]])]
    return FlowSequence(n, m, interval, MONDAY, list(frames))


class TestFlowFile:
    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "flow.txt"
        seq = tiny_sequence()
        save_flow_sequence(seq, path)
        again = load_flow_sequence(path)
        save_flow_sequence(again, tmp_path / "flow2.txt")
        assert path.read_bytes() == (tmp_path / "flow2.txt").read_bytes()
        assert again.n == 2 and again.m == 2 and again.interval_minutes == 60
        assert again.start == MONDAY
        for a, b in zip(seq.frames, again.frames):
            assert np.array_equal(a, b)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("#pasta-flow v1 n=2 m=3 interval_minutes=60 start=2021-04-05T00:00:00\n1,2,3,4,5\n")
        with pytest.raises(RaggedRowError):
            load_flow_sequence(path)

    def test_negative_value(self, tmp_path):
        path = tmp_path / "neg.txt"
        path.write_text("#pasta-flow v1 n=1 m=2 interval_minutes=60 start=2021-04-05T00:00:00\n1,-1\n")
        with pytest.raises(NegativeValueError):
            load_flow_sequence(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "hdr.txt"
        path.write_text("#pasta-flow v2 n=1 m=1\n1\n")
        with pytest.raises(HeaderError):
            load_flow_sequence(path)

    def test_bad_start_timestamp(self, tmp_path):
        path = tmp_path / "hdr2.txt"
        path.write_text("#pasta-flow v1 n=1 m=1 interval_minutes=60 start=notatime\n1\n")
        with pytest.raises(HeaderError):
            load_flow_sequence(path)

    def test_non_monotonic_interval(self, tmp_path):
        path = tmp_path / "mono.txt"
        path.write_text("#pasta-flow v1 n=1 m=1 interval_minutes=0 start=2021-04-05T00:00:00\n1\n")
        with pytest.raises(NonMonotonicError):
            load_flow_sequence(path)

    def test_unparseable_value(self, tmp_path):
        path = tmp_path / "val.txt"
        path.write_text("#pasta-flow v1 n=1 m=2 interval_minutes=60 start=2021-04-05T00:00:00\n1,zap\n")
        with pytest.raises(DataError):
            load_flow_sequence(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_flow_sequence(tmp_path / "nope.txt")


class TestScaler:
    def test_endpoints_and_midpoint(self):
        s = Scaler.fit([np.array([2.0, 6.0])])
        assert s.apply(2.0) == -1.0
        assert s.apply(6.0) == 1.0
        assert s.apply(4.0) == 0.0

    def test_quarter_point(self):
        s = Scaler.fit([np.arange(101.0)])
        assert s.apply(25.0) == -0.5

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1e6, 1e6), st.floats(1e-3, 1e6), st.floats(0, 1))
    def test_invert_round_trip(self, lo, span, frac):
        s = Scaler(lo, lo + span)
        x = lo + frac * span
        assert s.invert(s.apply(x)) == pytest.approx(x, abs=1e-9, rel=1e-12)

    def test_degenerate_range(self):
        with pytest.raises(ScalerError):
            Scaler.fit([np.full((2, 2), 3.0)])


class TestFragments:
    def test_default_lag_arithmetic_hourly(self):
        spec = FragmentSpec.for_interval(60)
        idx = spec.source_indices(672)
        assert idx[:5] == [672, 671, 670, 669, 668]
        assert idx[5:11] == [648, 624, 600, 576, 552, 528]
        assert idx[11:] == [504, 336, 168, 0]

    def test_half_hour_interval_steps(self):
        spec = FragmentSpec.for_interval(30)
        assert spec.closeness_step == 2
        assert spec.periodic_step == 48
        assert spec.trend_step == 336

    def test_unrepresentable_step(self):
        with pytest.raises(DataError):
            FragmentSpec.for_interval(45)

    def test_channel_labels_default(self):
        labels = FragmentSpec.for_interval(60).channel_labels(60)
        assert len(labels) == 15
        assert labels[0] == "closeness-1h"
        assert labels[4] == "closeness-5h"
        assert labels[5] == "periodic-1d"
        assert labels[10] == "periodic-6d"
        assert labels[11] == "trend-1w"
        assert labels[14] == "trend-4w"

    def test_insufficient_history_skipped(self):
        spec = FragmentSpec.for_interval(60)
        assert spec.min_history() == 672
        frames = [np.array([[float(k), 1.0]]) for k in range(700)]
        seq = FlowSequence(1, 2, 60, MONDAY, frames)
        scaler = Scaler.fit(frames)
        samples = build_samples(seq, spec, scaler)
        assert samples[0].target_index == 673
        assert samples[-1].target_index == 699

    def test_no_valid_target_raises(self):
        seq = tiny_sequence()
        with pytest.raises(HistoryError):
            build_samples(seq, FragmentSpec.for_interval(60), Scaler.fit(seq.frames))


class TestBuildSamples:
    def make(self, count=400, tc=2, tp=1, tt=1):
        frames = [np.full((2, 3), float(k)) for k in range(count)]
        seq = FlowSequence(2, 3, 60, MONDAY, frames)
        spec = FragmentSpec.for_interval(60, tc, tp, tt)
        scaler = Scaler.fit(frames)
        return seq, spec, scaler

    def test_channel_order_and_values(self):
        seq, spec, scaler = self.make()
        samples = build_samples(seq, spec, scaler)
        s = samples[0]
        assert s.target_index == 169
        t = 168
        expected_sources = [t, t - 1, t - 24, t - 168]
        got = [float(scaler.invert(s.input[0, 0, c])) for c in range(spec.total)]
        assert got == pytest.approx(expected_sources, abs=1e-9)
        assert s.input.shape == (2, 3, 4)
        assert float(scaler.invert(s.target[0, 0])) == pytest.approx(169.0, abs=1e-9)
        assert s.target_raw[0, 0] == 169.0

    def test_appending_frames_preserves_earlier_samples(self):
        seq, spec, scaler = self.make()
        first = build_samples(seq, spec, scaler)
        seq.frames.append(np.full((2, 3), 1e3))
        second = build_samples(seq, spec, scaler)
        assert len(second) == len(first) + 1
        for a, b in zip(first, second):
            assert np.array_equal(a.input, b.input)
            assert np.array_equal(a.target, b.target)

    def test_build_input_one_past_end(self):
        seq, spec, scaler = self.make()
        inp, ext = build_input(seq, spec, scaler, len(seq))
        assert inp.shape == (2, 3, 4)
        assert ext.shape == (32,)
        with pytest.raises(HistoryError):
            build_input(seq, spec, scaler, len(seq) + 1)

    def test_normalized_inputs_within_unit_range(self):
        seq, spec, scaler = self.make()
        for s in build_samples(seq, spec, scaler):
            assert np.all(s.input >= -1.0) and np.all(s.input <= 1.0)
            assert np.all(s.target >= -1.0) and np.all(s.target <= 1.0)


class TestExternalFeatures:
    def test_monday_midnight_hourly(self):
        vec = external_features(MONDAY, 60)
        assert vec.shape == (32,)
        assert vec[0] == 1.0 and vec[24] == 1.0
        assert vec.sum() == 2.0

    def test_sunday_half_hour(self):
        vec = external_features(datetime(2021, 4, 11, 23, 30), 30)
        assert vec.shape == (56,)
        assert vec[47] == 1.0
        assert vec[48 + 6] == 1.0

    def test_holiday_flag(self, tmp_path):
        path = tmp_path / "holidays.txt"
        path.write_text("# national holidays\n\n2021-04-05\n2021-12-25\n")
        holidays = load_holidays(path)
        assert date(2021, 4, 5) in holidays
        assert external_features(MONDAY, 60, holidays)[-1] == 1.0
        assert external_features(datetime(2021, 4, 6), 60, holidays)[-1] == 0.0

    def test_one_hot_blocks(self):
        for hour in (0, 7, 23):
            vec = external_features(datetime(2021, 4, 7, hour), 60)
            assert vec[:24].sum() == 1.0
            assert vec[24:31].sum() == 1.0

    def test_unsupported_interval(self):
        with pytest.raises(DataError):
            external_features(MONDAY, 45)
        assert external_dimension(60) == 32
        assert external_dimension(30) == 56


class TestSynthetic:
    def test_deterministic_files(self, tmp_path):
        a = generate_synthetic(4, 5, days=2, hotspots=((1, 1),), seed=9)
        b = generate_synthetic(4, 5, days=2, hotspots=((1, 1),), seed=9)
        save_flow_sequence(a, tmp_path / "a.txt")
        save_flow_sequence(b, tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_different_seeds_differ(self):
        a = generate_synthetic(4, 4, days=1, seed=1)
        b = generate_synthetic(4, 4, days=1, seed=2)
        assert not all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))

    def test_non_negative(self):
        seq = generate_synthetic(6, 6, days=3, noise=0.5, seed=3)
        assert all(np.all(f >= 0.0) for f in seq.frames)

    def test_hotspots_become_high_low(self):
        seq = generate_synthetic(16, 16, days=7, hotspots=((2, 2), (12, 3)), noise=0.05, seed=5)
        from pastaflow.grid_data import PEAK_HOURS

        peak_frames = [
            k for k in range(len(seq)) if seq.timestamp(k).hour in PEAK_HOURS
        ]
        assert peak_frames
        for spot in ((2, 2), (12, 3)):
            hits = sum(
                1 for k in peak_frames if quadrants(seq.frames[k]).labels[spot] == "HL"
            )
            assert hits >= 0.5 * len(peak_frames)

    def test_out_of_bounds_hotspot(self):
        with pytest.raises(DataError):
            generate_synthetic(4, 4, days=1, hotspots=((4, 0),), seed=0)

    def test_frame_count(self):
        seq = generate_synthetic(3, 3, days=2, interval_minutes=30, seed=0)
        assert len(seq) == 2 * 48

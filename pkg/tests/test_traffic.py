import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iptm.traffic import (
    CorridorConfig,
    CorridorError,
    DriveTrace,
    Intersection,
    TraceFormatError,
    aggregate_bins,
    classify_arrival,
    classify_trip,
    generate_corridor_traffic,
    load_bin_profiles,
    load_trace,
    parse_trace,
    simulate_vehicle,
    write_bin_profiles,
    write_trace,
)

CORR = CorridorConfig.default()


def one_signal(green_start=0.0, green=55.0, x=250.0):
    return CorridorConfig((Intersection(x, 100.0, green_start, green),), speed_limit=15.0, length=600.0)


class TestTraceIo:
    def test_three_rows(self):
        tr = parse_trace("t_sec,v_mps,x_m\n0,0,0\n1,1,0.5\n2,2,2\n")
        assert len(tr) == 3 and tr.x[-1] == 2.0

    def test_decreasing_time(self):
        with pytest.raises(TraceFormatError, match="line 4"):
            parse_trace("t_sec,v_mps\n0,0\n2,1\n1,1\n")

    def test_speed_only_integrates(self):
        tr = parse_trace("t_sec,v_mps\n0,0\n1,2\n2,4\n4,4\n5,0\n")
        # trapezoids: 1, 3, 8, 2
        np.testing.assert_allclose(tr.x, [0, 1, 4, 12, 14])

    def test_bad_header(self):
        with pytest.raises(TraceFormatError, match="line 1"):
            parse_trace("time,speed\n0,0\n")

    def test_non_numeric(self):
        with pytest.raises(TraceFormatError, match="line 2"):
            parse_trace("t_sec,v_mps\nzero,0\n")

    def test_negative_speed(self):
        with pytest.raises(TraceFormatError):
            parse_trace("t_sec,v_mps\n0,-1\n")

    def test_round_trip(self, tmp_path):
        tr = simulate_vehicle(CORR, 10.0)
        write_trace(tr, tmp_path / "a.csv")
        back = load_trace(tmp_path / "a.csv")
        np.testing.assert_allclose(back.v, tr.v, atol=1e-6)
        np.testing.assert_allclose(back.x, tr.x, atol=1e-4)
        assert back.vehicle_id == "a"


class TestCorridor:
    def test_default_valid(self):
        assert len(CORR.intersections) == 6 and CORR.cycle == 100.0

    def test_overlapping(self):
        with pytest.raises(CorridorError):
            CorridorConfig((Intersection(300.0), Intersection(300.0)), length=600.0)

    def test_mixed_cycles(self):
        with pytest.raises(CorridorError):
            CorridorConfig((Intersection(100.0, 100.0), Intersection(300.0, 90.0)), length=600.0)

    def test_bad_green(self):
        with pytest.raises(CorridorError):
            CorridorConfig((Intersection(100.0, 100.0, 0.0, 100.0),), length=600.0)

    def test_signal_algebra(self):
        s = Intersection(100.0, 100.0, 20.0, 55.0)
        assert s.red_onset == 75.0
        assert s.is_green(20.0) and s.is_green(74.9) and not s.is_green(75.0)
        assert s.next_green(80.0) == 120.0
        assert s.green_windows(0.0, 130.0) == [(20.0, 75.0), (120.0, 175.0)]


class TestGenerator:
    def test_all_green_no_stops(self):
        cfg = one_signal(green=99.9)
        tr = simulate_vehicle(cfg, 0.0)
        assert tr.stop_count() == 0
        assert tr.v.max() == pytest.approx(15.0)

    def test_mid_red_single_stop(self):
        # green 0..55 then red until 100; the vehicle reaches the line near t=24 s
        # if departing at 60 s it arrives in red and must wait for the next green at 100
        cfg = one_signal(green_start=0.0, green=55.0)
        tr = simulate_vehicle(cfg, 60.0)
        assert tr.stop_count() == 1
        t_cross = tr.time_at_position(250.0)
        assert cfg.intersections[0].is_green(t_cross)
        assert 100.0 <= t_cross < 115.0

    def test_deterministic(self):
        a = generate_corridor_traffic(CORR, 3, 11)
        b = generate_corridor_traffic(CORR, 3, 11)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.v, y.v)

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            generate_corridor_traffic(CORR, 0, 1)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31))
    def test_traces_respect_signals(self, seed):
        (tr,) = generate_corridor_traffic(CORR, 1, seed)
        dx = np.diff(tr.x)
        vmean = 0.5 * (tr.v[1:] + tr.v[:-1]) * np.diff(tr.t)
        assert np.all(tr.v >= 0) and np.all(dx >= -1e-9)
        assert abs(tr.x[-1] - vmean.sum()) <= 0.01 * tr.x[-1]
        assert tr.v.max() <= CORR.speed_limit + 1e-9
        assert np.all(np.diff(tr.v) <= 2.0 + 1e-9)
        for sig in CORR.intersections:
            t_cross = tr.time_at_position(sig.position)
            assert sig.is_green(t_cross)
            # standing within a metre of a red line means stopped
            near = (tr.x > sig.position - 1.0) & (tr.x < sig.position) & (tr.t < t_cross)
            for t, v in zip(tr.t[near], tr.v[near]):
                if not sig.is_green(t):
                    assert v == 0.0


class TestClassify:
    def test_bin5_example(self):
        red = CORR.intersections[0].red_onset
        assert classify_arrival(red + 45.0, CORR) == 5

    def test_red_onset_is_bin1(self):
        assert classify_arrival(CORR.intersections[0].red_onset, CORR) == 1

    def test_modulo(self):
        red = CORR.intersections[0].red_onset
        assert classify_arrival(red + 145.0, CORR) == 5

    @given(st.floats(0.0, 1e5), st.integers(-50, 50))
    def test_cycle_shift(self, t, k):
        assert classify_arrival(t, CORR) == classify_arrival(t + 100.0 * k, CORR)

    def test_trace_never_arrives(self):
        tr = DriveTrace([0.0, 1.0], [0.0, 1.0], [0.0, 0.5])
        with pytest.raises(CorridorError):
            classify_trip(tr, CORR)


class TestAggregate:
    def _const(self, v, n=11):
        t = np.arange(n, dtype=float)
        return DriveTrace(t, np.full(n, v), v * t)

    def test_single_trace(self):
        tr = simulate_vehicle(CORR, 0.0)
        (prof,) = [b for b in aggregate_bins([tr], [3], 1.0, 50.0) if b.bin_index == 3]
        np.testing.assert_allclose(prof.mean_v, tr.v[:51])
        assert np.all(prof.std_v == 0)

    def test_two_constants(self):
        bins = aggregate_bins([self._const(10.0), self._const(20.0)], [2, 2], 1.0, 10.0)
        np.testing.assert_allclose(bins[1].mean_v, 15.0)
        np.testing.assert_allclose(bins[1].std_v, 5.0)
        assert bins[1].support_count == 2

    def test_empty_bin_unusable(self):
        bins = aggregate_bins([self._const(10.0)], [2], 1.0, 10.0)
        assert not bins[0].usable and bins[1].usable and len(bins) == 10

    def test_padding_after_finish(self):
        bins = aggregate_bins([self._const(10.0)], [1], 1.0, 20.0)
        assert np.all(bins[0].mean_v[11:] == 0.0)

    def test_bad_assignment(self):
        with pytest.raises(ValueError):
            aggregate_bins([self._const(1.0)], [11], 1.0, 10.0)

    def test_csv_round_trip(self, tmp_path):
        bins = aggregate_bins([self._const(10.0), self._const(20.0)], [2, 2], 1.0, 10.0)
        write_bin_profiles(bins, tmp_path / "b.csv")
        back = load_bin_profiles(tmp_path / "b.csv")
        assert [b.bin_index for b in back] == list(range(1, 11))
        np.testing.assert_allclose(back[1].mean_v, 15.0)
        assert back[1].support_count == 2 and back[0].support_count == 0

    def test_mean_profile_lands_in_own_bin(self):
        traces = generate_corridor_traffic(CORR, 200, 5)
        assign = [classify_trip(t, CORR) for t in traces]
        bins = aggregate_bins(traces, assign, 1.0, 900.0)
        checked = 0
        for b in bins:
            if b.support_count < 5:
                continue
            tr = b.as_trace(t0=b.depart_phase, route_length=CORR.length)
            assert classify_trip(tr, CORR) == b.bin_index
            checked += 1
        assert checked >= 5

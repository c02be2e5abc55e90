import math
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from precswitch.intervals import (
    SwitchingWindows,
    WindowOverlapError,
    build_switching_windows,
    expected_window_count,
    validate_windows,
)
from precswitch.lti import ScenarioSpec, Step, TimingMetrics

CC_WINDOWS_10MS = [(64, 120), (180, 210), (244, 300), (350, 380), (414, 470), (550, 580), (614, 670), (790, 791)]
CC_WINDOWS_20MS = [(32, 60), (90, 105), (122, 150), (175, 190), (207, 235), (275, 290), (307, 335), (395, 396)]


def _scenario(step_times, settling, horizon):
    steps = tuple(Step(t, (1.0 + i,)) for i, t in enumerate(step_times))
    return ScenarioSpec(steps, settling, 0.1, horizon, 1.0, 2.0)


def test_cc_windows(cc):
    w = build_switching_windows(cc.scenario, cc.metrics, 0.01, 800)
    assert list(w) == CC_WINDOWS_10MS
    assert w.mu == 8


def test_cc_windows_at_20ms(cc):
    w = build_switching_windows(cc.scenario, cc.metrics, 0.02, 400)
    assert list(w) == CC_WINDOWS_20MS


def test_cc_count_matches_closed_form(cc):
    assert expected_window_count(cc.scenario, cc.metrics) == 8


def test_single_step_exactly_two_settling_times():
    scen = _scenario([0.0], 1.0, 2.0)
    metrics = TimingMetrics(0.4, 0.5, 1.0)
    w = build_switching_windows(scen, metrics, 0.1, 20)
    assert list(w) == [(5, 10)]
    assert expected_window_count(scen, metrics) == 1


def test_overlap_names_pair():
    scen = _scenario([0.0, 0.5], 1.0, 4.0)
    metrics = TimingMetrics(0.4, 0.3, 1.0)
    with pytest.raises(WindowOverlapError) as info:
        build_switching_windows(scen, metrics, 0.1, 40)
    assert info.value.pair == (1, 2)
    assert "1" in str(info.value) and "2" in str(info.value)


def test_window_past_horizon_is_clipped_with_warning():
    scen = _scenario([0.0, 1.0], 0.5, 1.2)
    metrics = TimingMetrics(0.2, 0.3, 0.5)
    with pytest.warns(UserWarning):
        w = build_switching_windows(scen, metrics, 0.1, 12)
    assert all(hi <= 12 for _, hi in w)
    assert validate_windows(w, 12) == []


class TestValidate:
    def test_ok(self):
        assert validate_windows(SwitchingWindows(((64, 120), (180, 210))), 800) == []

    def test_overlap(self):
        problems = validate_windows([(64, 120), (100, 130)], 800)
        assert len(problems) == 1
        assert "windows 1 and 2" in problems[0]

    def test_out_of_range(self):
        problems = validate_windows([(790, 805)], 800)
        assert problems and "outside" in problems[0]

    def test_reports_every_problem(self):
        problems = validate_windows([(0, 5), (3, 2), (1, 1)], 10)
        assert len(problems) >= 4

    def test_empty_is_valid(self):
        assert validate_windows([], 10) == []


def test_window_container():
    w = SwitchingWindows(([1, 3], [5, 5]))
    assert w.windows == ((1, 3), (5, 5))
    assert w.widths() == [3, 1]
    assert w.in_window_samples() == 4
    assert w.as_lists() == [[1, 3], [5, 5]]
    assert w[1] == (5, 5) and len(w) == 2


@st.composite
def integral_scenarios(draw):
    """Scenarios whose step times and metrics are whole multiples of ``h``."""
    h = draw(st.sampled_from([0.01, 0.02, 0.05, 0.1]))
    ts = draw(st.integers(4, 30))
    tp = draw(st.integers(2, ts))
    tr_half = draw(st.integers(1, tp - 1))
    gap = draw(st.integers(ts + 2, ts + 40))
    r = draw(st.integers(1, 4))
    starts = [i * gap for i in range(r)]
    tail = draw(st.integers(2 * ts, 2 * ts + 6 * ts))
    N = starts[-1] + tail
    scen = _scenario([round(s * h, 10) for s in starts], round(ts * h, 10), round(N * h, 10))
    metrics = TimingMetrics(round(2 * tr_half * h, 10), round(tp * h, 10), round(ts * h, 10))
    return scen, metrics, h, N, dict(ts=ts, tp=tp, tr_half=tr_half, starts=starts)


@settings(max_examples=200, deadline=None)
@given(integral_scenarios())
def test_window_count_closed_form(case):
    scen, metrics, h, N, ints = case
    w = build_switching_windows(scen, metrics, h, N)
    r = len(ints["starts"])
    # independent integer recomputation of the post-settle count
    post = math.ceil((N - (ints["starts"][-1] + 2 * ints["ts"])) / ints["ts"])
    assert w.mu == (2 * r - 1) + post
    assert w.mu == expected_window_count(scen, metrics)


@settings(max_examples=200, deadline=None)
@given(integral_scenarios())
def test_windows_inside_range(case):
    scen, metrics, h, N, ints = case
    w = build_switching_windows(scen, metrics, h, N)
    assert validate_windows(w, N) == []
    assert all(lo >= ints["tp"] and hi <= N for lo, hi in w)


@settings(max_examples=100, deadline=None)
@given(integral_scenarios(), st.sampled_from([2, 4, 5]))
def test_refining_h_scales_indices(case, factor):
    scen, metrics, h, N, ints = case
    coarse = build_switching_windows(scen, metrics, h, N)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fine = build_switching_windows(scen, metrics, round(h / factor, 12), N * factor)
    assert fine.mu == coarse.mu
    transient = 2 * len(ints["starts"]) - 1
    for b, ((lo_c, hi_c), (lo_f, hi_f)) in enumerate(zip(coarse, fine)):
        assert lo_f == factor * lo_c
        if b < transient:
            assert hi_f == factor * hi_c
        else:
            # post-settle windows keep their two-sample width
            assert hi_f == lo_f + 1

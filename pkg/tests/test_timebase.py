import math

import pytest
from hypothesis import given, strategies as st

from duplexrag.timebase import DEFAULT_TIMEBASE, FrameClock, TimeBase, frame_at, frames_to_seconds, seconds_to_frames


@pytest.mark.parametrize("d, n", [(0.0, 0), (2.0, 25), (0.5, 6), (0.8, 10), (20.0, 250)])
def test_seconds_to_frames_cases(d, n):
    assert seconds_to_frames(d, DEFAULT_TIMEBASE) == n


def test_half_frame_rounds_to_even():
    # 0.5 s is 6.25 frames, 0.2 s is 2.5 frames, 0.36 s is 4.5 frames
    assert seconds_to_frames(0.2) == 2
    assert seconds_to_frames(0.36) == 4
    assert seconds_to_frames(0.44) == 6  # 5.5 -> 6


@pytest.mark.parametrize("n, d", [(0, 0.0), (25, 2.0), (250, 20.0), (63, 5.04)])
def test_frames_to_seconds_cases(n, d):
    assert frames_to_seconds(n) == pytest.approx(d, abs=1e-12)


@pytest.mark.parametrize("bad", [-0.1, math.inf, math.nan])
def test_seconds_to_frames_rejects(bad):
    with pytest.raises(ValueError):
        seconds_to_frames(bad)


def test_frames_to_seconds_rejects_negative():
    with pytest.raises(ValueError):
        frames_to_seconds(-1)


@pytest.mark.parametrize("rate", [0.0, -12.5])
def test_timebase_rejects_non_positive_rate(rate):
    with pytest.raises(ValueError):
        TimeBase(rate)


@given(st.integers(min_value=0, max_value=10**6))
def test_round_trip_frames(n):
    assert seconds_to_frames(frames_to_seconds(n)) == n


@given(st.floats(min_value=0, max_value=1000, allow_nan=False))
def test_monotone_and_within_half_frame(d):
    n = seconds_to_frames(d)
    assert abs(n - d * 12.5) <= 0.5 + 1e-9
    assert seconds_to_frames(d + 0.08) >= n


@pytest.mark.parametrize("rate", [12.5, 25.0, 50.0])
def test_other_rates(rate):
    tb = TimeBase(rate)
    assert seconds_to_frames(2.0, tb) == round(2.0 * rate)
    assert tb.frame_period_s == pytest.approx(1 / rate)


def test_frame_at_floors_with_tolerance():
    assert frame_at(0.0) == 0
    assert frame_at(0.0799) == 0
    assert frame_at(0.08) == 1
    assert frame_at(2.0) == 25
    assert frame_at(0.24) == 3  # 0.24 * 12.5 is 2.9999999999999996 in floating point


def test_frame_clock_ticks():
    clock = FrameClock()
    assert clock.now() == 0.0
    for _ in range(25):
        clock.tick()
    assert clock.now() == pytest.approx(2.0)
    clock.reset()
    assert clock.now() == 0.0

"""Frame-indexed virtual time.

The generator runs one step per frame. A delay of ``d`` seconds spans
``round(d * frame_rate_hz)`` frames; rounding is half-to-even everywhere so
traces replay identically on every platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

DEFAULT_FRAME_RATE_HZ = 12.5


@dataclass(frozen=True)
class TimeBase:
    """Frame rate of the token stream."""

    frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ

    def __post_init__(self):
        if not (self.frame_rate_hz > 0 and math.isfinite(self.frame_rate_hz)):
            raise ValueError(f"frame_rate_hz must be positive, got {self.frame_rate_hz!r}")

    @property
    def frame_period_s(self) -> float:
        return 1.0 / self.frame_rate_hz


DEFAULT_TIMEBASE = TimeBase()


def seconds_to_frames(d: float, tb: TimeBase = DEFAULT_TIMEBASE) -> int:
    """Number of frames spanned by a delay of ``d`` seconds.

    Python's ``round`` is round-half-to-even, which is the mode we want.

    Raises:
        ValueError: if ``d`` is negative or not finite.
    """
    if not math.isfinite(d) or d < 0:
        raise ValueError(f"delay must be a non-negative finite number of seconds, got {d!r}")
    return int(round(d * tb.frame_rate_hz))


def frames_to_seconds(n: int, tb: TimeBase = DEFAULT_TIMEBASE) -> float:
    if n < 0:
        raise ValueError(f"frame count must be non-negative, got {n!r}")
    return n / tb.frame_rate_hz


def frame_at(t: float, tb: TimeBase = DEFAULT_TIMEBASE) -> int:
    """Index of the frame whose period contains instant ``t`` (floor)."""
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t!r}")
    # tolerate float noise such as 2.0 * 12.5 landing at 24.999999
    return int(math.floor(t * tb.frame_rate_hz + 1e-9))


class FrameClock:
    """Virtual clock that advances one frame per tick."""

    def __init__(self, tb: TimeBase = DEFAULT_TIMEBASE):
        self.tb = tb
        self.frame = 0

    def now(self) -> float:
        return frames_to_seconds(self.frame, self.tb)

    def tick(self) -> int:
        self.frame += 1
        return self.frame

    def reset(self) -> None:
        self.frame = 0

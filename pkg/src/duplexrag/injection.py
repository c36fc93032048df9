"""Streaming reference injection.

With trigger frame ``i_ret`` and a retrieval delay spanning ``D`` frames, the
``l`` reference vectors are added to the temporal input one per frame over

    i_ret + D < i <= i_ret + D + l

using reference index ``i - (i_ret + D)`` (1-based). When the reference was
dropped, the dropout vector is added at the single frame ``i_ret + D``.

Insertive mode leaves every frame's input untouched and instead splices the
``l`` vectors as extra temporal steps right after frame ``i_ret + D``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .refenc import ReferenceEmbedding
from .timebase import DEFAULT_TIMEBASE, TimeBase, seconds_to_frames
from .tokens import StepInput

ADDITIVE, INSERTIVE = "additive", "insertive"
INJECTION_MODES = (ADDITIVE, INSERTIVE)


class InjectionError(RuntimeError):
    """An injection window asked for a reference vector that does not exist."""


@dataclass(frozen=True)
class InjectionSchedule:
    i_ret: int
    delay_frames: int
    length: int
    mode: str = ADDITIVE
    dropout: bool = False

    def __post_init__(self):
        if self.i_ret < 0 or self.delay_frames < 0 or self.length < 0:
            raise ValueError("i_ret, delay_frames and length must be non-negative")
        if self.mode not in INJECTION_MODES:
            raise ValueError(f"injection mode must be one of {INJECTION_MODES}, got {self.mode!r}")
        if self.dropout and self.length != 1:
            raise ValueError("a dropout schedule injects exactly one step")

    @property
    def anchor(self) -> int:
        """``i_ret + D``: the last frame before the window opens."""
        return self.i_ret + self.delay_frames

    @property
    def start(self) -> int:
        """First injected frame."""
        return self.anchor if self.dropout else self.anchor + 1

    @property
    def end(self) -> int:
        """Last injected frame (``start - 1`` for an empty window)."""
        return self.start + self.length - 1

    def frames(self) -> range:
        return range(self.start, self.end + 1)

    def ref_index(self, i: int) -> Optional[int]:
        """1-based reference index injected at frame ``i``, or ``None`` outside the window."""
        if self.start <= i <= self.end:
            return i - self.start + 1
        return None

    def to_record(self) -> dict:
        return {"start": self.start, "len": self.length}


def build_injection_schedule(i_ret: int, d: float, l: int, tb: TimeBase = DEFAULT_TIMEBASE,
                             mode: str = ADDITIVE) -> InjectionSchedule:
    if l < 0:
        raise ValueError(f"window length must be non-negative, got {l}")
    return InjectionSchedule(i_ret, seconds_to_frames(d, tb), l, mode)


def dropout_schedule(i_ret: int, delay_frames: int, mode: str = ADDITIVE) -> InjectionSchedule:
    return InjectionSchedule(i_ret, delay_frames, 1, mode, dropout=True)


def effective_input(i: int, h: StepInput, sched: Optional[InjectionSchedule],
                    ref: Optional[ReferenceEmbedding]) -> StepInput:
    """Reference-aware temporal input for frame ``i``."""
    if sched is None or sched.mode == INSERTIVE:
        return h
    if ref is None or ref.length < sched.length:
        raise InjectionError(
            f"schedule needs {sched.length} reference vectors, got {0 if ref is None else ref.length}")
    k = sched.ref_index(i)
    if k is None:
        return h
    if not 1 <= k <= ref.length:
        raise InjectionError(f"frame {i} maps to reference index {k} outside [1, {ref.length}]")
    return StepInput(h.h + ref.vectors[k - 1], h.frame)


def splice_insertive(inputs: Sequence[StepInput], sched: InjectionSchedule,
                     ref: ReferenceEmbedding) -> List[StepInput]:
    """Insert the reference vectors as extra steps after frame ``sched.anchor``.

    Inserted steps carry the anchor's frame index.
    """
    out: List[StepInput] = []
    for s in inputs:
        out.append(s)
        if s.frame == sched.anchor:
            out.extend(inserted_steps(sched, ref))
    return out


def inserted_steps(sched: InjectionSchedule, ref: ReferenceEmbedding) -> List[StepInput]:
    if ref.length < sched.length:
        raise InjectionError("reference shorter than the insertive schedule")
    return [StepInput(np.array(ref.vectors[k]), sched.anchor) for k in range(sched.length)]

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from duplexrag.injection import (
    INSERTIVE,
    InjectionError,
    build_injection_schedule,
    dropout_schedule,
    effective_input,
    splice_insertive,
)
from duplexrag.refenc import ReferenceEmbedding
from duplexrag.tokens import StepInput


def window_oracle(i_ret, D, l, frames):
    return {i for i in frames if i_ret + D < i <= i_ret + D + l}


def test_worked_example():
    sched = build_injection_schedule(10, 0.8, 3)
    assert sched.delay_frames == 10
    assert set(sched.frames()) == window_oracle(10, 10, 3, range(41)) == {21, 22, 23}
    assert [sched.ref_index(i) for i in (21, 22, 23)] == [1, 2, 3]
    assert sched.ref_index(20) is None and sched.ref_index(24) is None


def test_empty_and_zero_delay():
    assert list(build_injection_schedule(10, 0.8, 0).frames()) == []
    assert list(build_injection_schedule(10, 0.0, 4).frames()) == [11, 12, 13, 14]


def test_effective_input_cases():
    sched = build_injection_schedule(10, 0.8, 3)
    e = np.eye(4)
    ref = ReferenceEmbedding(e[:3], 12, 4)
    rng = np.random.default_rng(1)
    hs = {i: StepInput(rng.standard_normal(4), i) for i in range(30)}
    assert effective_input(22, hs[22], None, ref) is hs[22]
    zero = ReferenceEmbedding(np.zeros((3, 4)), 12, 4)
    assert np.array_equal(effective_input(22, hs[22], sched, zero).h, hs[22].h)
    for i in range(30):
        out = effective_input(i, hs[i], sched, ref).h
        if 10 + 10 < i <= 10 + 10 + 3:
            assert np.array_equal(out, hs[i].h + e[i - 20 - 1])
        else:
            assert np.array_equal(out, hs[i].h)
    assert np.array_equal(effective_input(22, hs[22], sched, ref).h, hs[22].h + e[1])


def test_short_reference_is_an_error():
    sched = build_injection_schedule(0, 0.0, 5)
    with pytest.raises(InjectionError):
        effective_input(1, StepInput(np.zeros(4), 1), sched, ReferenceEmbedding(np.ones((2, 4)), 8, 4))


def test_dropout_schedule_hits_anchor_only():
    sched = dropout_schedule(10, 25)
    assert list(sched.frames()) == [35]
    with pytest.raises(ValueError):
        build_injection_schedule(0, -0.1, 3)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 200), st.floats(0, 10), st.integers(0, 64))
def test_window_property(i_ret, d, l):
    sched = build_injection_schedule(i_ret, d, l)
    D = int(np.rint(d * 12.5))
    span = range(i_ret + D + l + 3)
    assert set(sched.frames()) == window_oracle(i_ret, D, l, span)


def test_insertive_splices_after_anchor():
    sched = build_injection_schedule(2, 0.16, 2, mode=INSERTIVE)  # anchor 4
    ref = ReferenceEmbedding(np.arange(8.0).reshape(2, 4), 8, 4)
    inputs = [StepInput(np.zeros(4), i) for i in range(8)]
    out = splice_insertive(inputs, sched, ref)
    assert len(out) == 10
    assert [s.frame for s in out] == [0, 1, 2, 3, 4, 4, 4, 5, 6, 7]
    assert np.array_equal(out[5].h, ref.vectors[0]) and np.array_equal(out[6].h, ref.vectors[1])
    # additive inputs stay untouched in insertive mode
    assert effective_input(5, inputs[5], sched, ref) is inputs[5]

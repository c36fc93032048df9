import numpy as np
import pytest

from conftest import plain_script, rag_script
from duplexrag.backends import (
    FaultInjector,
    LatencyModel,
    MockBackend,
    ScriptedOracle,
    TranscriptContext,
    TranscriptTurn,
)
from duplexrag.engine import (
    ConversationTrace,
    EngineConfig,
    GeneratorFailure,
    run_conversation,
    validate_trace,
)
from duplexrag.generators import ReplayGenerator, ScriptedGenerator
from duplexrag.injection import splice_insertive
from duplexrag.refenc import ReferenceEncoder
from duplexrag.timebase import TimeBase
from duplexrag.tokens import PAD, RET, TextToken, TokenFrame


def scripted(script, seed=0):
    return ScriptedGenerator(script, np.random.default_rng(seed))


def run(gen, backend, tables, **cfg):
    return run_conversation(gen, gen.user_feed(), backend, tables, cfg=EngineConfig(**cfg))


def rag_meta(gen):
    (turn,) = [t for t in gen.meta()["turns"] if t["rag"]]
    return turn


def test_no_rag_turn_replays_generator(tables):
    gen = scripted(plain_script())
    trace = run(gen, MockBackend("x"), tables)
    assert trace.jobs == []
    assert trace.frames == gen.frames
    assert not trace.events("ret_trigger")


def test_injection_precedes_body_with_fast_backend(tables):
    gen = scripted(rag_script(lead_words=6))  # 2.0 s lead
    meta = rag_meta(gen)
    trace = run(gen, ScriptedOracle(gen.references(), LatencyModel.fixed(0.8)), tables)
    (job,) = trace.jobs
    assert job.trigger_frame == meta["ret_frame"] == meta["lead_frame"] - 1
    assert job.completed_frame == job.trigger_frame + 16  # round(1.3 * 12.5)
    (start,) = trace.events("inject_start")
    assert start["frame"] == job.completed_frame + 1 < meta["body_onset_frame"]
    assert validate_trace(trace) == []


def test_timeout_injects_dropout_once(tables):
    gen = scripted(rag_script(lead_words=6))
    trace = run(gen, MockBackend("x", LatencyModel.fixed(3.0), timeout_s=2.0), tables)
    (job,) = trace.jobs
    assert job.outcome.status == "timeout"
    timeout_frame = job.trigger_frame + 31  # round(2.5 * 12.5)
    assert job.completed_frame == timeout_frame
    injected = {r["frame"]: r["inj"] for r in trace.frame_records() if r["inj"] is not None}
    assert injected == {timeout_frame: "dropout"}
    assert validate_trace(trace) == []


def test_additive_inputs_differ_exactly_in_window(tables):
    gen = scripted(rag_script(lead_words=9))
    enc = ReferenceEncoder(tables)
    trace = run_conversation(gen, gen.user_feed(), ScriptedOracle(gen.references(), LatencyModel.fixed(0.4)),
                             tables, enc, EngineConfig(keep_inputs=True))
    sched = trace.jobs[0].schedule
    ref = enc.encode_text(gen.references()[0])
    assert sched.length == ref.length > 0
    for raw, eff in zip(trace.raw_inputs, trace.inputs):
        k = sched.ref_index(raw.frame)
        if k is None:
            assert np.array_equal(raw.h, eff.h)
        else:
            assert np.allclose(eff.h - raw.h, ref.vectors[k - 1])


def test_insertive_mode_splices_steps(tables):
    gen = scripted(rag_script(lead_words=9))
    trace = run(gen, ScriptedOracle(gen.references(), LatencyModel.fixed(0.4)), tables,
                injection="insertive", keep_inputs=True)
    sched = trace.jobs[0].schedule
    assert len(gen.inserted) == sched.length > 0
    assert all(s.frame == sched.anchor for s in gen.inserted)
    assert len(trace.frames) == len(gen.frames)
    ref = ReferenceEncoder(tables).encode_text(gen.references()[0])
    spliced = splice_insertive(trace.raw_inputs, sched, ref)
    assert [s.frame for s in trace.inputs] == [s.frame for s in spliced]
    assert all(np.array_equal(a.h, b.h) for a, b in zip(trace.inputs, spliced))
    assert validate_trace(trace) == []


def test_outcome_after_turn_end_is_discarded(tables):
    gen = scripted(rag_script(lead_words=2, body_words=4))  # turn over about 2.3 s after RET
    trace = run(gen, ScriptedOracle(gen.references(), LatencyModel.fixed(2.8), timeout_s=None), tables)
    (job,) = trace.jobs
    assert job.discarded
    assert trace.events("outcome_discarded")
    assert not trace.events("inject_start")
    assert all(r["inj"] is None for r in trace.frame_records())


def speaking_frames(n, ret_at=(), q=8):
    voiced = (1,) * q
    return [TokenFrame(k, RET if k in ret_at else PAD, voiced if k < n - 5 else (0,) * q, (0,) * q)
            for k in range(n)]


def test_second_trigger_dropped_while_busy(tables):
    gen = ReplayGenerator(speaking_frames(80, ret_at=(5, 10)))
    trace = run_conversation(gen, gen.user_feed(), MockBackend("paris", LatencyModel.fixed(1.0)), tables)
    assert len(trace.jobs) == 1
    (dropped,) = trace.events("trigger_dropped")
    assert dropped["frame"] == 10


def test_error_outcome_takes_dropout_path(tables):
    gen = scripted(rag_script(lead_words=9))
    be = FaultInjector(MockBackend("x", LatencyModel.fixed(0.4)), 1.0, np.random.default_rng(0))
    trace = run(gen, be, tables)
    (job,) = trace.jobs
    assert job.outcome.status == "error" and job.schedule.dropout
    assert validate_trace(trace) == []


def test_empty_reference_injects_nothing(tables):
    gen = scripted(rag_script(lead_words=9))
    trace = run(gen, MockBackend("", LatencyModel.fixed(0.4)), tables)
    assert trace.events("inject_start")[0]["length"] == 0
    assert all(r["inj"] is None for r in trace.frame_records())
    assert validate_trace(trace) == []


def test_phase_sequence(tables):
    gen = scripted(rag_script(lead_words=9))
    trace = run(gen, ScriptedOracle(gen.references(), LatencyModel.fixed(0.4)), tables)
    seq = [r.get("phase") or r["event"] for r in trace.events()
           if r["event"] in ("phase", "inject_start", "inject_end")]
    i = seq.index("speaking_preRAG")
    assert seq[i:i + 5] == ["speaking_preRAG", "inject_start", "injecting", "inject_end", "speaking_normal"]


def test_generator_failure_keeps_partial_trace(tables):
    class Broken(ReplayGenerator):
        def step(self, h, frame):
            if frame == 7:
                raise RuntimeError("boom")
            return super().step(h, frame)

    gen = Broken(speaking_frames(20))
    with pytest.raises(GeneratorFailure) as err:
        run_conversation(gen, gen.user_feed(), MockBackend("x"), tables)
    assert err.value.frame == 7
    assert len(err.value.trace.frames) == 7
    assert err.value.trace.events("abort")


def test_trace_round_trip(tmp_path, tables, scripts):
    gen = scripted(scripts["everest"])
    trace = run(gen, ScriptedOracle(gen.references(), LatencyModel.fixed(0.8)), tables)
    path = tmp_path / "t.jsonl"
    trace.write(path)
    loaded = ConversationTrace.load(path)
    assert loaded.to_jsonl() == trace.to_jsonl()
    assert loaded.frames == trace.frames
    assert validate_trace(loaded) == []


def test_validate_trace_catches_tampering(tables):
    gen = scripted(rag_script(lead_words=9))
    trace = run(gen, ScriptedOracle(gen.references(), LatencyModel.fixed(0.4)), tables)
    rec = next(r for r in trace.frame_records() if r["inj"] is not None)
    rec["inj"] = None
    stray = trace.frame_records()[3]
    stray["inj"] = 1
    problems = validate_trace(trace)
    assert any("expected" in p for p in problems)
    assert any("outside every schedule" in p for p in problems)


def test_generator_only_sees_its_input(tables):
    seen = []

    class Spy(ReplayGenerator):
        def step(self, h, frame):
            seen.append(frame)
            return super().step(h, frame)

    gen = Spy(speaking_frames(30, ret_at=(3,)))
    run_conversation(gen, gen.user_feed(), MockBackend("x", LatencyModel.fixed(0.2)), tables)
    assert seen == list(range(30))


class Talkative(ReplayGenerator):
    def transcript(self, cutoff_s):
        return TranscriptContext((TranscriptTurn("user", "what is the capital of france", 0.0),), cutoff_s)


def test_realtime_mode_does_not_block(tables):
    tb = TimeBase(100.0)
    gen = Talkative(speaking_frames(70, ret_at=(5,)))
    be = MockBackend("paris is the capital", LatencyModel.fixed(0.15))
    trace = run_conversation(gen, gen.user_feed(), be, tables, cfg=EngineConfig(mode="realtime", settle_s=0.05),
                             tb=tb)
    assert len(trace.frames) == 70
    (job,) = trace.jobs
    assert job.outcome.is_ok
    assert job.completed_frame >= job.trigger_frame + 5 + 15
    assert validate_trace(trace) == []


def test_engine_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(mode="turbo")
    with pytest.raises(ValueError):
        EngineConfig(injection="overlay")
    with pytest.raises(ValueError):
        EngineConfig(max_inflight=2)
    with pytest.raises(ValueError):
        EngineConfig(settle_s=-1)


def test_word_tokens_present(scripts):
    gen = scripted(scripts["moon_single"])
    words = [f for f in gen.frames if f.model_text.kind is TextToken.word(0).kind]
    assert len(words) == len(scripts["moon_single"].turns[1].words())

"""Frame-loop orchestrator.

Each frame the engine drains retrieval outcomes that are due, composes the
temporal input, adds the active reference window, steps the generator and
records the emitted frame. When the generator emits RET the engine opens a
retrieval job: it waits ``settle_s`` for the recognizer, dispatches the
transcript to the back end and keeps generating meanwhile (pre-RAG content).
The stream never waits on the back end.

Timing in simulated mode: a job triggered at frame ``i_ret`` completes at
frame ``i_ret + seconds_to_frames(settle_s + latency_s)``. That completion
frame is the injection anchor, so the window opens on the next frame. A
timeout or error instead injects the dropout vector at the completion frame
itself.
"""

from __future__ import annotations

import json
import logging
import queue
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .backends import Backend, RetrievalOutcome, TranscriptContext
from .injection import (
    ADDITIVE,
    INJECTION_MODES,
    INSERTIVE,
    InjectionSchedule,
    dropout_schedule,
    effective_input,
    inserted_steps,
)
from .refenc import ReferenceEmbedding, ReferenceEncoder
from .timebase import DEFAULT_TIMEBASE, TimeBase, frames_to_seconds, seconds_to_frames
from .tokens import (
    EmbeddingTables,
    StepInput,
    TokenFrame,
    compose_step_input,
    is_padding_audio,
    silent_audio,
    PAD,
)

logger = logging.getLogger(__name__)

LISTENING = "listening"
SPEAKING_NORMAL = "speaking_normal"
SPEAKING_PRERAG = "speaking_preRAG"
INJECTING = "injecting"
PHASES = (LISTENING, SPEAKING_NORMAL, SPEAKING_PRERAG, INJECTING)

SIMULATED, REALTIME = "simulated", "realtime"


class GeneratorFailure(RuntimeError):
    """The generator raised; ``trace`` holds everything up to the failing frame."""

    def __init__(self, frame: int, trace: "ConversationTrace", cause: BaseException):
        super().__init__(f"generator failed at frame {frame}: {cause}")
        self.frame = frame
        self.trace = trace


@dataclass
class EngineConfig:
    mode: str = SIMULATED
    injection: str = ADDITIVE
    settle_s: float = 0.5
    max_inflight: int = 1
    keep_inputs: bool = False

    def __post_init__(self):
        if self.mode not in (SIMULATED, REALTIME):
            raise ValueError(f"engine.mode must be simulated or realtime, got {self.mode!r}")
        if self.injection not in INJECTION_MODES:
            raise ValueError(f"engine.injection must be one of {INJECTION_MODES}, got {self.injection!r}")
        if self.settle_s < 0:
            raise ValueError("engine.settle_s must be non-negative")
        if self.max_inflight != 1:
            raise ValueError("engine.max_inflight: only 1 is supported")


@dataclass
class RetrievalJob:
    job_id: int
    trigger_frame: int
    trigger_time_s: float
    settle_s: float
    dispatched_at_s: float
    dispatch_frame: int
    outcome: Optional[RetrievalOutcome] = None
    completed_at_s: Optional[float] = None
    completed_frame: Optional[int] = None
    discarded: bool = False
    schedule: Optional[InjectionSchedule] = None

    @property
    def pending(self) -> bool:
        return self.outcome is None

    @property
    def retrieval_delay_s(self) -> Optional[float]:
        if self.completed_at_s is None:
            return None
        return self.completed_at_s - self.trigger_time_s

    def to_record(self) -> dict:
        return {
            "job": self.job_id,
            "trigger_frame": self.trigger_frame,
            "settle_s": self.settle_s,
            "dispatched_at_s": self.dispatched_at_s,
            "completed_at_s": self.completed_at_s,
            "completed_frame": self.completed_frame,
            "status": None if self.outcome is None else self.outcome.status,
            "discarded": self.discarded,
            "schedule": None if self.schedule is None else {
                "start": self.schedule.start, "len": self.schedule.length,
                "mode": self.schedule.mode, "dropout": self.schedule.dropout},
        }


@dataclass
class ConversationTrace:
    """Frames and events of one run, in emission order."""

    tb: TimeBase = DEFAULT_TIMEBASE
    meta: Dict = field(default_factory=dict)
    records: List[dict] = field(default_factory=list)
    frames: List[TokenFrame] = field(default_factory=list)
    jobs: List[RetrievalJob] = field(default_factory=list)
    raw_inputs: List[StepInput] = field(default_factory=list)
    inputs: List[StepInput] = field(default_factory=list)

    def t(self, frame: int) -> float:
        return frames_to_seconds(frame, self.tb)

    def event(self, name: str, frame: int, **fields) -> dict:
        rec = {"event": name, "frame": frame, "t_s": self.t(frame)}
        rec.update(fields)
        self.records.append(rec)
        return rec

    def events(self, name: Optional[str] = None) -> List[dict]:
        return [r for r in self.records if "event" in r and (name is None or r["event"] == name)]

    def frame_records(self) -> List[dict]:
        return [r for r in self.records if "event" not in r]

    def to_jsonl(self) -> str:
        head = {"event": "meta", "frame": 0, "t_s": 0.0, "frame_rate_hz": self.tb.frame_rate_hz}
        head.update(self.meta)
        lines = [head] + self.records + [dict(event="job", frame=j.trigger_frame, t_s=j.trigger_time_s,
                                              **j.to_record()) for j in self.jobs]
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ConversationTrace":
        trace = None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                ev = rec.get("event")
                if ev == "meta":
                    meta = {k: v for k, v in rec.items() if k not in ("event", "frame", "t_s")}
                    trace = cls(TimeBase(meta.pop("frame_rate_hz")), meta)
                    continue
                if trace is None:
                    raise ValueError(f"{path}: trace does not start with a meta record")
                if ev == "job":
                    trace.jobs.append(_job_from_record(rec))
                    continue
                trace.records.append(rec)
                if ev is None:
                    trace.frames.append(TokenFrame.from_record(rec))
        if trace is None:
            raise ValueError(f"{path}: empty trace")
        return trace


def _job_from_record(rec: dict) -> RetrievalJob:
    status = rec.get("status")
    completed = rec.get("completed_at_s")
    outcome = None
    if status is not None:
        outcome = RetrievalOutcome(status, completed - rec["dispatched_at_s"])
    sched = None
    if rec.get("schedule"):
        sr = rec["schedule"]
        completed_frame = rec["completed_frame"]
        sched = InjectionSchedule(rec["trigger_frame"], completed_frame - rec["trigger_frame"],
                                  sr["len"], sr["mode"], sr["dropout"])
    return RetrievalJob(rec["job"], rec["trigger_frame"], rec["t_s"], rec["settle_s"],
                        rec["dispatched_at_s"], -1, outcome, completed, rec.get("completed_frame"),
                        rec.get("discarded", False), sched)


class DuplexEngine:
    def __init__(self, tables: EmbeddingTables, encoder: ReferenceEncoder,
                 cfg: Optional[EngineConfig] = None, tb: TimeBase = DEFAULT_TIMEBASE):
        self.tables = tables
        self.encoder = encoder
        self.cfg = cfg or EngineConfig()
        self.tb = tb

    def run(self, gen, user_feed: Sequence[TokenFrame], backend: Backend,
            meta: Optional[dict] = None) -> ConversationTrace:
        run = _Run(self, gen, backend, meta)
        return run.loop(user_feed)


class _Run:
    """State of one conversation; never shared across threads."""

    def __init__(self, engine: DuplexEngine, gen, backend: Backend, meta: Optional[dict]):
        self.e = engine
        self.cfg = engine.cfg
        self.tb = engine.tb
        self.gen = gen
        self.backend = backend
        if meta is None and hasattr(gen, "meta"):
            meta = gen.meta()
        self.trace = ConversationTrace(self.tb, dict(meta or {}))
        self.phase = LISTENING
        self.job: Optional[RetrievalJob] = None
        self.spoke_since_trigger = False
        self.turn_over = False
        self.sched: Optional[InjectionSchedule] = None
        self.ref: Optional[ReferenceEmbedding] = None
        self.input_frames: List[TokenFrame] = []
        self.realtime = self.cfg.mode == REALTIME
        self.outbox: "queue.Queue" = queue.Queue()
        self.pool = ThreadPoolExecutor(max_workers=1) if self.realtime else None
        self.t0 = 0.0
        self.dispatched = False

    # -- main loop ------------------------------------------------------

    def loop(self, user_feed: Sequence[TokenFrame]) -> ConversationTrace:
        prev_text, prev_audio = PAD, silent_audio(self.e.tables.num_codebooks)
        self.t0 = time.monotonic()
        try:
            for i, uf in enumerate(user_feed):
                if self.realtime:
                    self._sleep_until(i)
                self._maybe_dispatch(i)
                self._drain(i)
                in_frame = TokenFrame(i, prev_text, prev_audio, uf.user_audio)
                self.input_frames.append(in_frame)
                h = compose_step_input(self.input_frames, self.e.tables, i)
                h2, inj = self._inject(i, h)
                try:
                    text, audio = self.gen.step(h2, i)
                    out = TokenFrame(i, text, audio, uf.user_audio)
                except Exception as exc:
                    self.trace.event("abort", i, message=str(exc))
                    raise GeneratorFailure(i, self.trace, exc) from exc
                self._after_step(i, out, inj)
                prev_text, prev_audio = out.model_text, out.model_audio
            if self.job is not None and self.job.pending:
                self.trace.event("unfinished", len(user_feed), job=self.job.job_id)
        finally:
            if self.pool is not None:
                self.pool.shutdown(wait=False, cancel_futures=True)
        return self.trace

    def _sleep_until(self, i: int) -> None:
        delay = self.t0 + frames_to_seconds(i, self.tb) - time.monotonic()
        if delay > 0:
            time.sleep(delay)

    # -- phases -----------------------------------------------------------

    def _set_phase(self, phase: str, i: int) -> None:
        if phase != self.phase:
            self.phase = phase
            self.trace.event("phase", i, phase=phase)

    def _after_step(self, i: int, out: TokenFrame, inj) -> None:
        speaking = not is_padding_audio(out.model_audio)
        if self.job is not None and self.phase == SPEAKING_PRERAG:
            if speaking:
                self.spoke_since_trigger = True
            elif self.spoke_since_trigger:
                self.turn_over = True
        rec = out.to_record()
        rec["t_s"] = self.trace.t(i)
        rec["inj"] = inj
        if out.model_text.is_ret:
            self._trigger(i)
        elif self.phase in (LISTENING, SPEAKING_NORMAL):
            self._set_phase(SPEAKING_NORMAL if speaking else LISTENING, i)
        rec["phase"] = self.phase
        self.trace.records.append(rec)
        self.trace.frames.append(out)
        sched = self.sched
        if sched is None:
            return
        if sched.mode == INSERTIVE and i == sched.anchor:
            steps = inserted_steps(sched, self.ref)
            if hasattr(self.gen, "ingest"):
                for s in steps:
                    self.gen.ingest(s)
            if self.cfg.keep_inputs:
                self.trace.inputs.extend(steps)
            self.trace.event("inject_end", i, job=self.job.job_id, dropout=sched.dropout)
            self._finish_job()
            self._set_phase(SPEAKING_NORMAL, i)
        elif sched.mode == ADDITIVE and i >= sched.end:
            self.trace.event("inject_end", i, job=self.job.job_id, dropout=sched.dropout)
            self._finish_job()
            self._set_phase(SPEAKING_NORMAL, i)

    # -- retrieval lifecycle -------------------------------------------

    def _trigger(self, i: int) -> None:
        if self.job is not None:
            self.trace.event("trigger_dropped", i, reason="max_inflight", active_job=self.job.job_id)
            return
        t_ret = self.trace.t(i)
        job = RetrievalJob(
            job_id=len(self.trace.jobs), trigger_frame=i, trigger_time_s=t_ret,
            settle_s=self.cfg.settle_s, dispatched_at_s=t_ret + self.cfg.settle_s,
            dispatch_frame=i + seconds_to_frames(self.cfg.settle_s, self.tb))
        self.trace.jobs.append(job)
        self.job = job
        self.spoke_since_trigger = False
        self.turn_over = False
        self.dispatched = False
        self.trace.event("ret_trigger", i, job=job.job_id)
        self._set_phase(SPEAKING_PRERAG, i)
        # zero settle: dispatch before the next frame starts
        if job.dispatch_frame == i:
            self._maybe_dispatch(i)

    def _context(self, cutoff_s: float) -> TranscriptContext:
        if hasattr(self.gen, "transcript"):
            return self.gen.transcript(cutoff_s)
        return TranscriptContext((), cutoff_s)

    def _maybe_dispatch(self, i: int) -> None:
        job = self.job
        if job is None or self.dispatched or i < job.dispatch_frame:
            return
        self.dispatched = True
        ctx = self._context(job.dispatched_at_s)
        self.trace.event("dispatch", i, job=job.job_id, dispatched_at_s=job.dispatched_at_s,
                         transcript_turns=len(ctx))
        if self.realtime:
            self.pool.submit(self._worker, job, ctx)
            return
        outcome = self.backend.retrieve(ctx)
        job.outcome = outcome
        job.completed_at_s = job.dispatched_at_s + outcome.latency_s
        job.completed_frame = job.trigger_frame + seconds_to_frames(
            self.cfg.settle_s + outcome.latency_s, self.tb)

    def _worker(self, job: RetrievalJob, ctx: TranscriptContext) -> None:
        try:
            outcome = self.backend.retrieve(ctx)
        except Exception as exc:  # back ends should not raise; keep the totality guarantee anyway
            outcome = RetrievalOutcome.error(f"back end raised: {exc}")
        if not self.backend.live and outcome.latency_s > 0:
            time.sleep(outcome.latency_s)
        self.outbox.put((job, outcome))

    def _drain(self, i: int) -> None:
        job = self.job
        if job is None or self.sched is not None:
            return
        if self.realtime:
            try:
                _, outcome = self.outbox.get_nowait()
            except queue.Empty:
                return
            job.outcome = outcome
            job.completed_at_s = job.dispatched_at_s + outcome.latency_s
            job.completed_frame = i
        elif job.completed_frame is None or job.completed_frame > i:
            return
        self._on_outcome(i, job)

    def _on_outcome(self, i: int, job: RetrievalJob) -> None:
        outcome = job.outcome
        self.trace.event("outcome", i, job=job.job_id, **outcome.to_record())
        if self.turn_over:
            job.discarded = True
            self.trace.event("outcome_discarded", i, job=job.job_id, reason="turn ended")
            self._finish_job()
            self._set_phase(LISTENING, i)
            return
        delay_frames = i - job.trigger_frame
        mode = self.cfg.injection
        if outcome.is_ok:
            ref = self.e.encoder.encode(outcome.doc)
            sched = InjectionSchedule(job.trigger_frame, delay_frames, ref.length, mode)
        else:
            ref = self.e.encoder.dropped()
            sched = dropout_schedule(job.trigger_frame, delay_frames, mode)
        job.schedule = sched
        if sched.length == 0:
            self.trace.event("inject_start", i, job=job.job_id, length=0, dropout=False)
            self.trace.event("inject_end", i, job=job.job_id, dropout=False)
            self._finish_job()
            self._set_phase(SPEAKING_NORMAL, i)
            return
        self.sched, self.ref = sched, ref

    def _inject(self, i: int, h: StepInput):
        sched = self.sched
        if sched is None:
            self._record_inputs(h, h)
            return h, None
        if sched.mode == INSERTIVE:
            # spliced after this frame's own step, see _after_step
            self._record_inputs(h, h)
            if i == sched.anchor:
                self.trace.event("inject_start", i, job=self.job.job_id, length=sched.length,
                                 dropout=sched.dropout, inserted=sched.length)
                self._set_phase(INJECTING, i)
                return h, "inserted"
            return h, None
        k = sched.ref_index(i)
        h2 = effective_input(i, h, sched, self.ref)
        self._record_inputs(h, h2)
        if k is None:
            return h2, None
        if k == 1:
            self.trace.event("inject_start", i, job=self.job.job_id, length=sched.length,
                             dropout=sched.dropout)
            self._set_phase(INJECTING, i)
        return h2, ("dropout" if sched.dropout else k)

    def _record_inputs(self, raw: StepInput, eff: StepInput) -> None:
        if self.cfg.keep_inputs:
            self.trace.raw_inputs.append(raw)
            self.trace.inputs.append(eff)

    def _finish_job(self) -> None:
        self.job = None
        self.sched = None
        self.ref = None


def run_conversation(gen, user_feed: Sequence[TokenFrame], backend: Backend,
                     tables: EmbeddingTables, encoder: Optional[ReferenceEncoder] = None,
                     cfg: Optional[EngineConfig] = None, tb: TimeBase = DEFAULT_TIMEBASE,
                     meta: Optional[dict] = None) -> ConversationTrace:
    encoder = encoder or ReferenceEncoder(tables, tb=tb)
    return DuplexEngine(tables, encoder, cfg, tb).run(gen, user_feed, backend, meta)


def validate_trace(trace: ConversationTrace) -> List[str]:
    """Invariant violations in a finished trace (empty when it is sound).

    Checks that the stream never stalled, that every additive window covers
    exactly the frames its schedule names, that windows open right after the
    completion frame, and that each retrieval turn goes pre-RAG, injecting,
    then back to normal speech.
    """
    problems = []
    fr = trace.tb.frame_rate_hz
    recs = trace.frame_records()
    for k, rec in enumerate(recs):
        if rec["frame"] != k or rec["t_s"] != frames_to_seconds(k, trace.tb):
            problems.append(f"frame {k}: stream is not contiguous at {fr} Hz")
            break
    injected: Dict[int, object] = {r["frame"]: r["inj"] for r in recs if r.get("inj") is not None}
    windows = set()
    for job in trace.jobs:
        sched = job.schedule
        if job.outcome is None or job.discarded or sched is None:
            continue
        if job.completed_frame is not None and job.completed_frame < job.trigger_frame + \
                seconds_to_frames(job.settle_s, trace.tb):
            problems.append(f"job {job.job_id}: completed before the settle wait elapsed")
        expected_start = job.completed_frame if sched.dropout else job.completed_frame + 1
        if sched.start != expected_start:
            problems.append(f"job {job.job_id}: window starts at {sched.start}, expected {expected_start}")
        if sched.mode != ADDITIVE:
            continue
        for i in sched.frames():
            windows.add(i)
            want = "dropout" if sched.dropout else sched.ref_index(i)
            if injected.get(i) != want and i < len(recs):
                problems.append(f"job {job.job_id}: frame {i} injected {injected.get(i)!r}, expected {want!r}")
    for i in injected:
        if injected[i] != "inserted" and i not in windows:
            problems.append(f"frame {i}: injected outside every schedule window")
    # phase order per job
    by_job: Dict[int, List[str]] = {}
    current = None
    for r in trace.records:
        ev = r.get("event")
        if ev == "ret_trigger":
            current = r["job"]
            by_job[current] = []
        elif ev == "phase" and current is not None:
            by_job[current].append(r["phase"])
        elif ev in ("inject_start", "inject_end", "outcome_discarded") and current is not None:
            by_job[current].append(ev)
    for job in trace.jobs:
        seq = by_job.get(job.job_id, [])
        if job.outcome is None or job.discarded or "inject_end" not in seq:
            continue
        try:
            a = seq.index(SPEAKING_PRERAG)
            b = seq.index("inject_start", a)
            c = seq.index("inject_end", b)
            seq.index(SPEAKING_NORMAL, c)
        except ValueError:
            problems.append(f"job {job.job_id}: phase sequence {seq} is not preRAG -> inject -> normal")
    return problems

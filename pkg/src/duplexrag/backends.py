"""Retrieval back ends: transcript context in, reference document out.

Simulated back ends never sleep; they report a latency drawn from a
:class:`LatencyModel` and the engine turns that into a completion frame. HTTP
back ends are live and report wall-clock latency.

Every call to ``retrieve`` yields exactly one :class:`RetrievalOutcome`. Failures
are outcomes, not exceptions, so the engine's fault path always runs.
"""

from __future__ import annotations

import csv
import json
import logging
import socket
import string
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .refenc import ReferenceDoc

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 2.0
SPEAKERS = ("user", "model")


@dataclass(frozen=True)
class TranscriptTurn:
    speaker: str
    text: str
    end_time_s: float


@dataclass(frozen=True)
class TranscriptContext:
    """Conversation transcript visible to the back end at ``cutoff_time_s``."""

    turns: Tuple[TranscriptTurn, ...]
    cutoff_time_s: float

    def __post_init__(self):
        turns = tuple(t if isinstance(t, TranscriptTurn) else TranscriptTurn(*t) for t in self.turns)
        object.__setattr__(self, "turns", turns)
        last = float("-inf")
        for t in turns:
            if t.speaker not in SPEAKERS:
                raise ValueError(f"unknown speaker {t.speaker!r}")
            if t.end_time_s < last:
                raise ValueError("transcript turns must be sorted by end time")
            if t.end_time_s > self.cutoff_time_s + 1e-9:
                raise ValueError("transcript turn ends after the cutoff")
            last = t.end_time_s

    def __len__(self):
        return len(self.turns)

    def to_wire(self) -> list:
        return [{"speaker": t.speaker, "text": t.text} for t in self.turns]

    def render(self) -> str:
        return "\n".join(f"{t.speaker.capitalize()}: {t.text}" for t in self.turns)


# ---------------------------------------------------------------------------
# latency models
# ---------------------------------------------------------------------------

LATENCY_KINDS = ("fixed", "uniform", "histogram")


@dataclass(frozen=True)
class LatencyModel:
    kind: str = "fixed"
    value_s: float = 0.0
    lo_s: float = 0.0
    hi_s: float = 0.0
    edges: Tuple[float, ...] = ()
    masses: Tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(float(e) for e in self.edges))
        object.__setattr__(self, "masses", tuple(float(m) for m in self.masses))
        if self.kind not in LATENCY_KINDS:
            raise ValueError(f"latency kind must be one of {LATENCY_KINDS}, got {self.kind!r}")
        if self.kind == "fixed" and not self.value_s >= 0:
            raise ValueError(f"fixed latency must be >= 0, got {self.value_s}")
        if self.kind == "uniform":
            if not (0 <= self.lo_s <= self.hi_s):
                raise ValueError(f"uniform latency needs 0 <= lo <= hi, got ({self.lo_s}, {self.hi_s})")
        if self.kind == "histogram":
            if len(self.edges) != len(self.masses) + 1 or not self.masses:
                raise ValueError("histogram needs len(edges) == len(masses) + 1")
            if self.edges[0] < 0 or any(b <= a for a, b in zip(self.edges, self.edges[1:])):
                raise ValueError("histogram edges must be non-negative and strictly increasing")
            if any(m < 0 for m in self.masses) or abs(sum(self.masses) - 1.0) > 1e-6:
                raise ValueError("histogram masses must be non-negative and sum to 1")

    @classmethod
    def fixed(cls, d: float, seed: int = 0) -> "LatencyModel":
        return cls("fixed", value_s=d, seed=seed)

    @classmethod
    def uniform(cls, lo: float, hi: float, seed: int = 0) -> "LatencyModel":
        return cls("uniform", lo_s=lo, hi_s=hi, seed=seed)

    @classmethod
    def histogram(cls, edges: Sequence[float], masses: Sequence[float], seed: int = 0) -> "LatencyModel":
        return cls("histogram", edges=tuple(edges), masses=tuple(masses), seed=seed)

    @classmethod
    def from_csv(cls, path, seed: int = 0) -> "LatencyModel":
        """Read ``bin_lo,bin_hi,mass`` rows (header optional); masses are renormalized."""
        los, his, masses = [], [], []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    lo, hi, m = (float(x) for x in row[-3:])
                except ValueError:
                    continue  # header
                los.append(lo)
                his.append(hi)
                masses.append(m)
        if not masses:
            raise ValueError(f"{path}: no histogram rows")
        for prev_hi, lo in zip(his, los[1:]):
            if abs(prev_hi - lo) > 1e-9:
                raise ValueError(f"{path}: histogram bins must be contiguous")
        total = sum(masses)
        return cls.histogram([los[0]] + his, [m / total for m in masses], seed=seed)


def sample_latency(m: LatencyModel, rng: np.random.Generator) -> float:
    if m.kind == "fixed":
        return float(m.value_s)
    if m.kind == "uniform":
        return float(rng.uniform(m.lo_s, m.hi_s))
    # inverse CDF of the piecewise-uniform density
    u = rng.random()
    cdf = np.cumsum(m.masses)
    k = int(np.searchsorted(cdf, u, side="right"))
    k = min(k, len(m.masses) - 1)
    while m.masses[k] == 0 and k > 0:
        k -= 1
    below = cdf[k - 1] if k > 0 else 0.0
    frac = 0.0 if m.masses[k] == 0 else (u - below) / m.masses[k]
    frac = min(max(frac, 0.0), 1.0)
    lo, hi = m.edges[k], m.edges[k + 1]
    return float(lo + frac * (hi - lo))


# ---------------------------------------------------------------------------
# outcomes
# ---------------------------------------------------------------------------

OK, TIMEOUT, ERROR = "ok", "timeout", "error"


@dataclass(frozen=True)
class RetrievalOutcome:
    status: str
    latency_s: float
    doc: Optional[ReferenceDoc] = None
    message: str = ""

    @classmethod
    def ok(cls, doc: ReferenceDoc, latency_s: float) -> "RetrievalOutcome":
        return cls(OK, float(latency_s), doc)

    @classmethod
    def timed_out(cls, timeout_s: float) -> "RetrievalOutcome":
        return cls(TIMEOUT, float(timeout_s), message=f"no reference within {timeout_s:g} s")

    @classmethod
    def error(cls, message: str, latency_s: float = 0.0) -> "RetrievalOutcome":
        return cls(ERROR, float(latency_s), message=message)

    @property
    def is_ok(self) -> bool:
        return self.status == OK

    def to_record(self) -> dict:
        rec = {"status": self.status, "latency_s": self.latency_s}
        if self.doc is not None:
            rec["reference"] = self.doc.text
        if self.message:
            rec["message"] = self.message
        return rec


# ---------------------------------------------------------------------------
# simulated back ends
# ---------------------------------------------------------------------------


class Backend:
    """Back-end contract. ``live`` back ends take real wall time to answer."""

    live = False
    timeout_s: Optional[float] = DEFAULT_TIMEOUT_S

    def retrieve(self, ctx: TranscriptContext) -> RetrievalOutcome:
        raise NotImplementedError


class SimulatedBackend(Backend):
    def __init__(self, latency: LatencyModel, timeout_s: Optional[float] = DEFAULT_TIMEOUT_S,
                 rng: Optional[np.random.Generator] = None):
        if timeout_s is not None and timeout_s < 0:
            raise ValueError("timeout must be non-negative")
        self.latency = latency
        self.timeout_s = timeout_s
        self.rng = rng if rng is not None else np.random.default_rng(latency.seed)

    def document(self, ctx: TranscriptContext) -> Optional[str]:
        raise NotImplementedError

    def retrieve(self, ctx: TranscriptContext) -> RetrievalOutcome:
        if len(ctx) == 0:
            return RetrievalOutcome.error("empty transcript context")
        lat = sample_latency(self.latency, self.rng)
        if self.timeout_s is not None and lat > self.timeout_s:
            return RetrievalOutcome.timed_out(self.timeout_s)
        text = self.document(ctx)
        if text is None:
            return RetrievalOutcome.error("no reference available", lat)
        return RetrievalOutcome.ok(ReferenceDoc(text), lat)


class ScriptedOracle(SimulatedBackend):
    """Returns the conversation's attached references, in trigger order."""

    def __init__(self, references: Sequence[str], latency: LatencyModel,
                 timeout_s: Optional[float] = DEFAULT_TIMEOUT_S, rng=None):
        super().__init__(latency, timeout_s, rng)
        self.references = list(references)
        self._next = 0

    def document(self, ctx):
        if self._next >= len(self.references):
            return None
        text = self.references[self._next]
        self._next += 1
        return text


class MockBackend(SimulatedBackend):
    def __init__(self, reference: str = "", latency: Optional[LatencyModel] = None,
                 timeout_s: Optional[float] = DEFAULT_TIMEOUT_S, rng=None):
        super().__init__(latency or LatencyModel.fixed(0.0), timeout_s, rng)
        self.reference = reference

    def document(self, ctx):
        return self.reference


class FaultInjector(Backend):
    """Wraps a back end and turns its outcome into an error with probability ``p_error``."""

    def __init__(self, inner: Backend, p_error: float, rng: Optional[np.random.Generator] = None):
        if not 0.0 <= p_error <= 1.0:
            raise ValueError("p_error must lie in [0, 1]")
        self.inner = inner
        self.p_error = p_error
        self.rng = rng if rng is not None else np.random.default_rng(0)

    @property
    def live(self):
        return self.inner.live

    @property
    def timeout_s(self):
        return self.inner.timeout_s

    def retrieve(self, ctx):
        outcome = self.inner.retrieve(ctx)
        if self.rng.random() < self.p_error:
            return RetrievalOutcome.error("injected fault", outcome.latency_s)
        return outcome


# ---------------------------------------------------------------------------
# HTTP back ends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    """Opaque prompt text with ``$transcript`` and ``$last_user`` placeholders."""

    template_id: str
    text: str

    @classmethod
    def load(cls, path) -> "PromptTemplate":
        path = Path(path)
        return cls(path.stem, path.read_text(encoding="utf-8"))

    def render(self, ctx: TranscriptContext, **extra) -> str:
        last_user = next((t.text for t in reversed(ctx.turns) if t.speaker == "user"), "")
        return string.Template(self.text).safe_substitute(
            transcript=ctx.render(), last_user=last_user, **extra)


def post_json(endpoint: str, payload: dict, timeout_s: Optional[float]) -> Tuple[Optional[dict], RetrievalOutcome]:
    """POST ``payload`` and return ``(body, outcome)``.

    On failure ``body`` is None and ``outcome`` says why (timeout or error).
    On success ``outcome`` is ok with the measured latency but no document;
    the caller reads whichever field of ``body`` it needs.
    """
    data = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(endpoint, data=data, method="POST",
                                 headers={"Content-Type": "application/json"})
    t0 = time.monotonic()
    try:
        with urllib.request.urlopen(req, timeout=timeout_s) as resp:
            raw = resp.read()
    except urllib.error.HTTPError as exc:
        return None, RetrievalOutcome.error(f"HTTP {exc.code}", time.monotonic() - t0)
    except (socket.timeout, TimeoutError):
        return None, RetrievalOutcome.timed_out(timeout_s)
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            return None, RetrievalOutcome.timed_out(timeout_s)
        return None, RetrievalOutcome.error(f"network failure: {exc.reason}", time.monotonic() - t0)
    except OSError as exc:
        return None, RetrievalOutcome.error(f"network failure: {exc}", time.monotonic() - t0)
    elapsed = time.monotonic() - t0
    if timeout_s is not None and elapsed > timeout_s:
        return None, RetrievalOutcome.timed_out(timeout_s)
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        return None, RetrievalOutcome.error(f"malformed body: {exc}", elapsed)
    if not isinstance(body, dict):
        return None, RetrievalOutcome.error("malformed body: not a JSON object", elapsed)
    return body, RetrievalOutcome(OK, elapsed)


def _reference_outcome(body, outcome) -> RetrievalOutcome:
    if body is None:
        return outcome
    ref = body.get("reference")
    if not isinstance(ref, str):
        return RetrievalOutcome.error("malformed body: missing string field 'reference'", outcome.latency_s)
    return RetrievalOutcome.ok(ReferenceDoc(ref), outcome.latency_s)


def http_llm_retrieve(endpoint: str, ctx: TranscriptContext, prompt_template: PromptTemplate,
                      timeout_s: Optional[float] = DEFAULT_TIMEOUT_S) -> RetrievalOutcome:
    if len(ctx) == 0:
        return RetrievalOutcome.error("empty transcript context")
    payload = {"transcript": ctx.to_wire(), "template_id": prompt_template.template_id,
               "prompt": prompt_template.render(ctx)}
    return _reference_outcome(*post_json(endpoint, payload, timeout_s))


def http_search_retrieve(endpoint: str, ctx: TranscriptContext,
                         timeout_s: Optional[float] = DEFAULT_TIMEOUT_S) -> RetrievalOutcome:
    if len(ctx) == 0:
        return RetrievalOutcome.error("empty transcript context")
    payload = {"transcript": ctx.to_wire(), "template_id": "search"}
    return _reference_outcome(*post_json(endpoint, payload, timeout_s))


class HttpLLMBackend(Backend):
    live = True

    def __init__(self, endpoint: str, template: PromptTemplate, timeout_s: Optional[float] = DEFAULT_TIMEOUT_S):
        self.endpoint = endpoint
        self.template = template
        self.timeout_s = timeout_s

    def retrieve(self, ctx):
        return http_llm_retrieve(self.endpoint, ctx, self.template, self.timeout_s)


class HttpSearchBackend(Backend):
    live = True

    def __init__(self, endpoint: str, timeout_s: Optional[float] = DEFAULT_TIMEOUT_S):
        self.endpoint = endpoint
        self.timeout_s = timeout_s

    def retrieve(self, ctx):
        return http_search_retrieve(self.endpoint, ctx, self.timeout_s)

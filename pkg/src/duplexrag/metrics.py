"""Delay metrology over conversation traces.

All delays are reported in seconds, rounded to the microsecond:

* TTFAT: end of the user's utterance to the first model audio frame.
* keyword delay: response onset to the onset of the answer keyword.
* E2EKD: end of the user's utterance to the keyword onset.
* retrieval delay: RET trigger to retrieval completion, settle wait included.

Response onset is taken as ``user_end + TTFAT``, so E2EKD equals TTFAT plus
keyword delay up to the rounding of the individual values.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from .backends import PromptTemplate, TranscriptContext, TranscriptTurn, post_json
from .engine import ConversationTrace, RetrievalJob
from .timebase import DEFAULT_TIMEBASE, TimeBase, frame_at, frames_to_seconds
from .tokens import TokenFrame, is_padding_audio
from .vocab import normalize_words

METRICS = ("ttfat_s", "kd_s", "e2ekd_s", "retrieval_delay_s")


def _r(x: Optional[float]) -> Optional[float]:
    return None if x is None else round(float(x), 6)


@dataclass(frozen=True)
class TimedWord:
    word: str
    onset_s: float


def _timed(words) -> List[TimedWord]:
    out = [w if isinstance(w, TimedWord) else TimedWord(w[0], float(w[1])) for w in words]
    if any(b.onset_s < a.onset_s for a, b in zip(out, out[1:])):
        raise ValueError("word onsets must be non-decreasing")
    return out


def ttfat(frames: Union[ConversationTrace, Sequence[TokenFrame]], user_end_s: float,
          tb: TimeBase = DEFAULT_TIMEBASE) -> Optional[float]:
    """Time from ``user_end_s`` to the first non-padding model audio frame.

    A model that is already speaking at ``user_end_s`` gets 0.0. ``None`` when
    the model never responds.
    """
    if isinstance(frames, ConversationTrace):
        tb = frames.tb
        frames = frames.frames
    k0 = frame_at(user_end_s, tb)
    for f in frames[k0:]:
        if is_padding_audio(f.model_audio):
            continue
        if f.frame == k0:
            return 0.0
        return _r(max(0.0, frames_to_seconds(f.frame, tb) - user_end_s))
    return None


def keyword_onset(words: Sequence[TimedWord], keyword: str) -> Optional[float]:
    """Onset of the first run of words matching ``keyword`` (case- and punctuation-insensitive)."""
    target = normalize_words(keyword)
    if not target:
        return None
    norm = [" ".join(normalize_words(w.word)) for w in words]
    n = len(target)
    for k in range(len(norm) - n + 1):
        if norm[k:k + n] == target:
            return words[k].onset_s
    return None


def keyword_delay(words, keyword: str, response_onset_s: float) -> Optional[float]:
    onset = keyword_onset(_timed(words), keyword)
    if onset is None:
        return None
    return _r(onset - response_onset_s)


def e2ekd(words, keyword: str, user_end_s: float) -> Optional[float]:
    onset = keyword_onset(_timed(words), keyword)
    if onset is None:
        return None
    return _r(onset - user_end_s)


def retrieval_delay(job: RetrievalJob, tb: TimeBase = DEFAULT_TIMEBASE) -> Optional[float]:
    if job.completed_at_s is None:
        return None
    return _r(job.completed_at_s - frames_to_seconds(job.trigger_frame, tb))


def constraint_verdict(job: RetrievalJob, body_onset_frame: int) -> Optional[bool]:
    """True when the retrieval completed strictly before the body starts."""
    if job.completed_frame is None:
        return None
    return job.completed_frame < body_onset_frame


# ---------------------------------------------------------------------------
# keyword extraction
# ---------------------------------------------------------------------------


class AliasKeywordExtractor:
    """Returns the first alias that occurs in the response, as spelled there."""

    def extract(self, question: str, response_text: str, aliases: Sequence[str]) -> Optional[str]:
        resp = normalize_words(response_text)
        for alias in aliases:
            target = normalize_words(alias)
            n = len(target)
            for k in range(len(resp) - n + 1) if n else ():
                if resp[k:k + n] == target:
                    return " ".join(resp[k:k + n])
        return None


class HttpKeywordExtractor:
    """Asks a judge LLM for the keyword over the back-end wire format.

    The reply's ``reference`` field is the keyword; it is rejected unless it
    occurs in the response.
    """

    def __init__(self, endpoint: str, template: PromptTemplate, timeout_s: float = 30.0):
        self.endpoint = endpoint
        self.template = template
        self.timeout_s = timeout_s

    def extract(self, question, response_text, aliases):
        ctx = TranscriptContext((TranscriptTurn("user", question, 0.0),
                                 TranscriptTurn("model", response_text, 0.0)), 0.0)
        prompt = self.template.render(ctx, question=question, response=response_text,
                                      aliases=", ".join(aliases))
        body, outcome = post_json(self.endpoint, {"transcript": ctx.to_wire(),
                                                  "template_id": self.template.template_id,
                                                  "prompt": prompt}, self.timeout_s)
        if body is None or not isinstance(body.get("reference"), str):
            return None
        kw = " ".join(normalize_words(body["reference"]))
        return AliasKeywordExtractor().extract(question, response_text, [kw])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class DelayReport:
    script_id: str
    turn_idx: int
    ttfat_s: Optional[float] = None
    kd_s: Optional[float] = None
    e2ekd_s: Optional[float] = None
    retrieval_delay_s: Optional[float] = None
    constraint_ok: Optional[bool] = None
    keyword: Optional[str] = None
    keyword_mismatch: bool = False
    retrieval_status: Optional[str] = None

    def additivity_error(self) -> Optional[float]:
        if None in (self.ttfat_s, self.kd_s, self.e2ekd_s):
            return None
        return abs(self.e2ekd_s - (self.ttfat_s + self.kd_s))

    def to_record(self) -> dict:
        return asdict(self)


def measure_trace(trace: ConversationTrace, extractor=None) -> List[DelayReport]:
    """One report per keyword-bearing model turn recorded in the trace header."""
    extractor = extractor or AliasKeywordExtractor()
    tb = trace.tb
    sid = trace.meta.get("script_id", "")
    reports = []
    for turn in trace.meta.get("turns", []):
        rep = DelayReport(sid, turn["turn_idx"])
        user_end = turn.get("user_end_s")
        words = _timed(turn.get("words", []))
        aliases = [turn["keyword"]] + list(turn.get("aliases", []))
        kw = extractor.extract("", turn.get("response", " ".join(w.word for w in words)), aliases)
        rep.keyword = kw
        rep.keyword_mismatch = kw is None
        if user_end is not None:
            rep.ttfat_s = ttfat(trace.frames, user_end, tb)
            if kw is not None:
                rep.e2ekd_s = e2ekd(words, kw, user_end)
                if rep.ttfat_s is not None and rep.e2ekd_s is not None:
                    rep.kd_s = keyword_delay(words, kw, user_end + rep.ttfat_s)
        if turn.get("rag"):
            job = _job_for(trace.jobs, turn.get("ret_frame"))
            if job is not None:
                rep.retrieval_delay_s = retrieval_delay(job, tb)
                rep.constraint_ok = constraint_verdict(job, turn["body_onset_frame"])
                rep.retrieval_status = job.outcome.status if job.outcome else "pending"
        reports.append(rep)
    return reports


def _job_for(jobs: Iterable[RetrievalJob], ret_frame) -> Optional[RetrievalJob]:
    for j in jobs:
        if j.trigger_frame == ret_frame:
            return j
    return None


def write_reports(reports: Sequence[DelayReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


def read_reports(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------


def histogram(values: Sequence[float], bins: Union[int, Sequence[float]] = 20) -> List[tuple]:
    """Normalized ``(bin_lo, bin_hi, mass)`` rows.

    With explicit edges, values outside them land in open-ended underflow and
    overflow rows so the masses always sum to one.
    """
    x = np.asarray(list(values), dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot build a histogram from no values")
    if isinstance(bins, (int, np.integer)):
        edges = np.histogram_bin_edges(x, bins=int(bins))
    else:
        edges = np.asarray(list(bins), dtype=np.float64)
        if edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("histogram edges must be strictly increasing")
    counts, _ = np.histogram(x, bins=edges)
    rows = []
    under = int(np.sum(x < edges[0]))
    over = int(np.sum(x > edges[-1]))
    if under:
        rows.append((-math.inf, float(edges[0]), under / x.size))
    rows.extend((float(lo), float(hi), int(c) / x.size) for lo, hi, c in zip(edges[:-1], edges[1:], counts))
    if over:
        rows.append((float(edges[-1]), math.inf, over / x.size))
    return rows


def collect_metric_values(reports: Iterable[Union[DelayReport, dict]]) -> Dict[str, List[float]]:
    series: Dict[str, List[float]] = {m: [] for m in METRICS}
    for r in reports:
        rec = r.to_record() if isinstance(r, DelayReport) else r
        for m in METRICS:
            if rec.get(m) is not None:
                series[m].append(rec[m])
    return {m: v for m, v in series.items() if v}


def export_histograms(data, bins: Union[int, Sequence[float]], path) -> Dict[str, int]:
    """Write ``metric,bin_lo,bin_hi,mass`` CSV rows.

    ``data`` is either a mapping ``metric -> values`` or a collection of
    reports. Returns the number of values binned per metric.
    """
    if isinstance(data, Mapping):
        series = {k: list(v) for k, v in data.items() if len(v)}
    else:
        series = collect_metric_values(list(data))
    if not series:
        raise ValueError("nothing to export: empty report collection")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "bin_lo", "bin_hi", "mass"])
        for metric in sorted(series):
            for lo, hi, mass in histogram(series[metric], bins):
                w.writerow([metric, repr(lo), repr(hi), repr(mass)])
    return {m: len(v) for m, v in series.items()}


def read_histogram_csv(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"metric": r["metric"], "bin_lo": float(r["bin_lo"]), "bin_hi": float(r["bin_hi"]),
                 "mass": float(r["mass"])} for r in csv.DictReader(fh)]

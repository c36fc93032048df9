"""Training-data mechanics for retrieval-enabled conversation scripts.

A script is a list of turns. Retrieval-enabled model turns are split into a
lead (no external knowledge needed), a body (grounded in the attached
reference) and an optional tail. Tokens get frame positions from an alignment,
either a words-per-second layout or an explicit alignment file, and the RET
token replaces the model text token one frame before the first lead token.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .injection import InjectionSchedule, build_injection_schedule, dropout_schedule
from .refenc import DEFAULT_P_DROP, DEFAULT_RATIO, ReferenceDoc, compressed_length
from .seeding import rng_for
from .timebase import DEFAULT_TIMEBASE, TimeBase, frames_to_seconds, seconds_to_frames
from .tokens import (
    DEFAULT_AUDIO_VOCAB,
    DEFAULT_NUM_CODEBOOKS,
    PAD,
    RET,
    TextToken,
    TokenFrame,
    silent_audio,
)
from .vocab import Vocabulary, default_vocabulary

logger = logging.getLogger(__name__)

VARIANTS = ("v1", "v2", "v3", "single_turn")
SEGMENTS = ("lead", "body", "tail")

GREETING_DROP_P = 0.3
FALLBACK_P = 0.2
SHORT_LEAD_S = 2.0
BUFFER_S = 1.0


class ScriptError(ValueError):
    pass


# ---------------------------------------------------------------------------
# script records
# ---------------------------------------------------------------------------


@dataclass
class Turn:
    speaker: str
    text: str = ""
    lead: str = ""
    body: str = ""
    tail: str = ""
    reference: Optional[str] = None
    keyword: Optional[str] = None
    aliases: Tuple[str, ...] = ()
    greeting: bool = False

    @property
    def is_rag(self) -> bool:
        return self.reference is not None

    def segments(self) -> List[Tuple[str, str]]:
        if self.is_rag:
            return [(name, getattr(self, name)) for name in SEGMENTS]
        return [("text", self.text)]

    def words(self) -> List[Tuple[str, str]]:
        """``(segment, word)`` pairs in speaking order."""
        return [(seg, w) for seg, txt in self.segments() for w in txt.split()]

    def spoken_text(self) -> str:
        return " ".join(w for _, w in self.words())

    @classmethod
    def from_dict(cls, d: dict) -> "Turn":
        known = {"speaker", "text", "lead", "body", "tail", "reference", "keyword", "aliases", "greeting"}
        extra = set(d) - known
        if extra:
            raise ScriptError(f"unknown turn keys: {sorted(extra)}")
        kw = dict(d)
        kw["aliases"] = tuple(kw.get("aliases", ()))
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {"speaker": self.speaker}
        if self.is_rag:
            out.update(lead=self.lead, body=self.body, tail=self.tail, reference=self.reference)
        else:
            out["text"] = self.text
        if self.keyword is not None:
            out["keyword"] = self.keyword
        if self.aliases:
            out["aliases"] = list(self.aliases)
        if self.greeting:
            out["greeting"] = True
        return out


@dataclass
class ConversationScript:
    script_id: str
    topic: str
    variant: str
    turns: List[Turn] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ScriptError(f"{self.script_id}: variant must be one of {VARIANTS}, got {self.variant!r}")
        for k, t in enumerate(self.turns):
            if t.speaker not in ("user", "model"):
                raise ScriptError(f"{self.script_id}: turn {k} has unknown speaker {t.speaker!r}")
            if t.is_rag:
                if t.speaker != "model":
                    raise ScriptError(f"{self.script_id}: turn {k}: only model turns carry references")
                if not t.lead.split() or not t.body.split():
                    raise ScriptError(f"{self.script_id}: turn {k}: retrieval turn needs non-empty lead and body")
            elif not t.text.split():
                raise ScriptError(f"{self.script_id}: turn {k}: empty turn text")
        if self.variant == "single_turn":
            speakers = sorted(t.speaker for t in self.turns)
            if speakers != ["model", "user"]:
                raise ScriptError(f"{self.script_id}: single_turn needs exactly one user and one model turn")

    def rag_turn_indices(self) -> List[int]:
        return [k for k, t in enumerate(self.turns) if t.is_rag]

    @property
    def has_greeting(self) -> bool:
        return bool(self.turns) and self.turns[0].speaker == "model" and self.turns[0].greeting

    @classmethod
    def from_dict(cls, d: dict) -> "ConversationScript":
        extra = set(d) - {"script_id", "topic", "variant", "turns"}
        if extra:
            raise ScriptError(f"unknown script keys: {sorted(extra)}")
        try:
            turns = [Turn.from_dict(t) for t in d["turns"]]
            return cls(str(d["script_id"]), str(d.get("topic", "")), d["variant"], turns)
        except KeyError as exc:
            raise ScriptError(f"missing script key {exc}") from None
        except TypeError as exc:
            raise ScriptError(str(exc)) from None

    def to_dict(self) -> dict:
        return {"script_id": self.script_id, "topic": self.topic, "variant": self.variant,
                "turns": [t.to_dict() for t in self.turns]}

    @classmethod
    def load(cls, path) -> "ConversationScript":
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ScriptError(f"{path}: invalid JSON: {exc}") from None
        except ScriptError as exc:
            raise ScriptError(f"{path}: {exc}") from None


def load_scripts(directory) -> List[ConversationScript]:
    paths = sorted(Path(directory).glob("*.json"))
    return [ConversationScript.load(p) for p in paths]


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignedToken:
    turn_idx: int
    token_idx: int
    segment: str
    word: str
    onset_s: float
    frame: int


@dataclass
class AlignedTurn:
    turn_idx: int
    turn: Turn
    tokens: List[AlignedToken]
    end_s: float

    @property
    def start_s(self) -> float:
        return self.tokens[0].onset_s

    @property
    def start_frame(self) -> int:
        return self.tokens[0].frame

    def segment_tokens(self, segment: str) -> List[AlignedToken]:
        return [t for t in self.tokens if t.segment == segment]

    @property
    def lead_frame(self) -> int:
        return self._first("lead").frame

    @property
    def body_onset_frame(self) -> int:
        return self._first("body").frame

    @property
    def body_onset_s(self) -> float:
        return self._first("body").onset_s

    @property
    def d_lead_s(self) -> float:
        """Duration of the lead: first lead onset to first body onset."""
        return self._first("body").onset_s - self._first("lead").onset_s

    def _first(self, segment: str) -> AlignedToken:
        toks = self.segment_tokens(segment)
        if not toks:
            raise ScriptError(f"turn {self.turn_idx} has no aligned {segment} tokens")
        return toks[0]


@dataclass
class AlignmentConfig:
    words_per_second: float = 3.0
    lead_in_s: float = 0.5
    response_gap_s: float = 0.4
    turn_gap_s: float = 0.5
    trailing_s: float = 3.0


class Alignment:
    """Per-token frame positions for a script."""

    def __init__(self, turns: List[AlignedTurn], tb: TimeBase = DEFAULT_TIMEBASE):
        self.turns = turns
        self.tb = tb
        for at in turns:
            frames = [t.frame for t in at.tokens]
            if any(b <= a for a, b in zip(frames, frames[1:])):
                raise ScriptError(f"turn {at.turn_idx}: alignment frames must strictly increase")

    def __getitem__(self, turn_idx: int) -> AlignedTurn:
        for at in self.turns:
            if at.turn_idx == turn_idx:
                return at
        raise KeyError(turn_idx)

    @property
    def end_s(self) -> float:
        return max((at.end_s for at in self.turns), default=0.0)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"turn_idx": t.turn_idx, "token_idx": t.token_idx, "frame": t.frame})
                 for at in self.turns for t in at.tokens]
        return "".join(line + "\n" for line in lines)


def align_script(script: ConversationScript, tb: TimeBase = DEFAULT_TIMEBASE,
                 cfg: Optional[AlignmentConfig] = None) -> Alignment:
    """Lay turns out back to back at a constant speaking rate."""
    cfg = cfg or AlignmentConfig()
    word_s = 1.0 / cfg.words_per_second
    if word_s < tb.frame_period_s:
        raise ScriptError("words_per_second too high: two words would share a frame")
    t = cfg.lead_in_s
    prev = None
    out = []
    for k, turn in enumerate(script.turns):
        if prev is not None:
            t += cfg.response_gap_s if (prev == "user" and turn.speaker == "model") else cfg.turn_gap_s
        toks = []
        for j, (seg, w) in enumerate(turn.words()):
            onset = t + j * word_s
            toks.append(AlignedToken(k, j, seg, w, onset, seconds_to_frames(onset, tb)))
        t += len(toks) * word_s
        out.append(AlignedTurn(k, turn, toks, t))
        prev = turn.speaker
    return Alignment(out, tb)


def load_alignment(path, script: ConversationScript, tb: TimeBase = DEFAULT_TIMEBASE,
                   words_per_second: float = 3.0) -> Alignment:
    """Read an explicit ``{turn_idx, token_idx, frame}`` JSONL alignment."""
    frames: Dict[Tuple[int, int], int] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                frames[(int(rec["turn_idx"]), int(rec["token_idx"]))] = int(rec["frame"])
            except KeyError as exc:
                raise ScriptError(f"{path}:{n}: missing key {exc}") from None
    out = []
    for k, turn in enumerate(script.turns):
        toks = []
        for j, (seg, w) in enumerate(turn.words()):
            if (k, j) not in frames:
                raise ScriptError(f"{path}: no frame for turn {k} token {j}")
            f = frames[(k, j)]
            toks.append(AlignedToken(k, j, seg, w, frames_to_seconds(f, tb), f))
        end = toks[-1].onset_s + 1.0 / words_per_second
        out.append(AlignedTurn(k, turn, toks, end))
    return Alignment(out, tb)


# ---------------------------------------------------------------------------
# frame rendering
# ---------------------------------------------------------------------------


def place_ret(at: AlignedTurn) -> int:
    """Frame that carries RET for a retrieval-enabled turn: one before the first lead token."""
    if not at.turn.is_rag:
        raise ScriptError(f"turn {at.turn_idx} is not retrieval-enabled")
    lead = at.lead_frame
    if lead == 0:
        raise ScriptError(f"turn {at.turn_idx}: first lead token at frame 0 has no predecessor")
    return lead - 1


def render_frames(script: ConversationScript, alignment: Alignment, rng: np.random.Generator,
                  tb: TimeBase = DEFAULT_TIMEBASE, vocab: Optional[Vocabulary] = None,
                  num_codebooks: int = DEFAULT_NUM_CODEBOOKS, audio_vocab: int = DEFAULT_AUDIO_VOCAB,
                  trailing_s: float = 3.0, with_ret: bool = True) -> List[TokenFrame]:
    """Token frames for the whole conversation.

    Speaking frames get toy audio codes in ``[1, audio_vocab)``; silence is
    all-zero. The model text channel carries each model word's id at its
    aligned frame and PAD elsewhere.
    """
    vocab = vocab or default_vocabulary()
    n = seconds_to_frames(alignment.end_s + trailing_s, tb)
    codes = rng.integers(1, audio_vocab, size=(n, 2, num_codebooks))
    model_on = np.zeros(n, dtype=bool)
    user_on = np.zeros(n, dtype=bool)
    text = [PAD] * n
    for at in alignment.turns:
        lo = at.start_frame
        hi = min(n, max(seconds_to_frames(at.end_s, tb), lo + 1))
        (model_on if at.turn.speaker == "model" else user_on)[lo:hi] = True
        if at.turn.speaker == "model":
            for tok in at.tokens:
                ids = vocab.encode(tok.word)
                text[tok.frame] = TextToken.word(ids[0] if ids else vocab.oov_id)
    if with_ret:
        for k in script.rag_turn_indices():
            text[place_ret(alignment[k])] = RET
    silent = silent_audio(num_codebooks)
    return [
        TokenFrame(i, text[i],
                   tuple(codes[i, 0]) if model_on[i] else silent,
                   tuple(codes[i, 1]) if user_on[i] else silent)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# delay sampling, greeting drop, audio gating
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DelayDraw:
    d_s: float
    fallback: bool


def draw_training_delay(d_lead: float, rng: np.random.Generator, p: Optional[float] = None) -> DelayDraw:
    """Simulated retrieval delay for a lead of ``d_lead`` seconds.

    Short leads (< 2 s), and a 0.2 fallback share of the rest, draw from
    ``U(0, d_lead)``. Otherwise the draw is ``U(1.0, d_lead - 1.0)``, which keeps
    at least one second between injection and the body. Pass ``p`` to force the
    branch variable instead of drawing it.
    """
    if not d_lead > 0:
        raise ValueError(f"lead duration must be positive, got {d_lead!r}")
    if p is None:
        p = rng.random()
    if d_lead < SHORT_LEAD_S or p < FALLBACK_P:
        return DelayDraw(float(rng.uniform(0.0, d_lead)), True)
    lo, hi = BUFFER_S, d_lead - BUFFER_S
    if hi <= lo:
        return DelayDraw(lo, False)
    return DelayDraw(float(rng.uniform(lo, hi)), False)


def sample_training_delay(d_lead: float, rng: np.random.Generator, p: Optional[float] = None) -> float:
    return draw_training_delay(d_lead, rng, p).d_s


def drop_greeting(script: ConversationScript, p: float = GREETING_DROP_P,
                  rng: Optional[np.random.Generator] = None) -> ConversationScript:
    """Remove the leading model greeting with probability ``p``.

    Scripts without a greeting are returned unchanged and consume no draw.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("greeting drop probability must lie in [0, 1]")
    if not script.has_greeting:
        return script
    rng = rng if rng is not None else np.random.default_rng()
    if rng.random() < p:
        out = copy.copy(script)
        out.turns = list(script.turns[1:])
        return out
    return script


def gate_audio(samples, sample_rate: float, window_ms: float = 80.0,
               threshold_dbfs: float = -65.0) -> np.ndarray:
    """Zero every window whose RMS level is below ``threshold_dbfs``.

    Full scale is amplitude 1.0. The last window may be shorter than
    ``window_ms`` and is judged on its own samples.
    """
    if sample_rate <= 0:
        raise ValueError("sample_rate must be positive")
    x = np.asarray(samples, dtype=np.float64)
    out = x.copy()
    if x.size == 0:
        return out
    win = max(1, int(round(sample_rate * window_ms / 1000.0)))
    for lo in range(0, x.size, win):
        seg = x[lo:lo + win]
        rms = math.sqrt(float(np.mean(seg * seg)))
        level = 20.0 * math.log10(rms) if rms > 0 else -math.inf
        if level < threshold_dbfs:
            out[lo:lo + win] = 0.0
    return out


# ---------------------------------------------------------------------------
# training examples
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    p_greeting_drop: float = GREETING_DROP_P
    p_drop: float = DEFAULT_P_DROP
    ratio: int = DEFAULT_RATIO
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    num_codebooks: int = DEFAULT_NUM_CODEBOOKS
    audio_vocab: int = DEFAULT_AUDIO_VOCAB


@dataclass
class TrainingExample:
    script_id: str
    turn_idx: int
    i_ret: int
    lead_frame: int
    d_lead_s: float
    d_prime_s: float
    fallback: bool
    dropout: bool
    ref_len_tokens: int
    schedule: InjectionSchedule
    frames: List[TokenFrame] = field(default_factory=list, repr=False)

    def to_record(self) -> dict:
        return {
            "script_id": self.script_id,
            "turn_idx": self.turn_idx,
            "i_ret": self.i_ret,
            "lead_frame": self.lead_frame,
            "d_lead_s": self.d_lead_s,
            "d_prime_s": self.d_prime_s,
            "dropout": self.dropout,
            "ref_len_tokens": self.ref_len_tokens,
            "schedule": self.schedule.to_record(),
        }


def build_training_examples(script: ConversationScript, seed: int, tb: TimeBase = DEFAULT_TIMEBASE,
                            cfg: Optional[SynthConfig] = None,
                            alignment: Optional[Alignment] = None) -> List[TrainingExample]:
    """Training examples for every retrieval-enabled turn of ``script``.

    Random decisions come from streams keyed by ``(seed, script_id)`` so the
    result does not depend on the order scripts are processed in.
    """
    cfg = cfg or SynthConfig()
    sid = script.script_id
    had_greeting = script.has_greeting
    script = drop_greeting(script, cfg.p_greeting_drop, rng_for(seed, sid, "greeting"))
    if alignment is not None and had_greeting and not script.has_greeting:
        alignment = _drop_first_turn(alignment)
    alignment = alignment or align_script(script, tb, cfg.align)
    frames = render_frames(script, alignment, rng_for(seed, sid, "audio"), tb,
                           num_codebooks=cfg.num_codebooks, audio_vocab=cfg.audio_vocab,
                           trailing_s=cfg.align.trailing_s)
    delay_rng = rng_for(seed, sid, "delay")
    drop_rng = rng_for(seed, sid, "dropout")
    examples = []
    for k in script.rag_turn_indices():
        try:
            at = alignment[k]
            i_ret = place_ret(at)
            draw = draw_training_delay(at.d_lead_s, delay_rng)
            dropped = bool(drop_rng.random() < cfg.p_drop)
        except (ScriptError, ValueError, KeyError) as exc:
            raise ScriptError(f"{sid}: turn {k}: {exc}") from exc
        n_tokens = len(ReferenceDoc(script.turns[k].reference))
        if dropped:
            sched = dropout_schedule(i_ret, seconds_to_frames(draw.d_s, tb))
        else:
            sched = build_injection_schedule(i_ret, draw.d_s, compressed_length(n_tokens, cfg.ratio), tb)
        examples.append(TrainingExample(sid, k, i_ret, at.lead_frame, at.d_lead_s, draw.d_s,
                                        draw.fallback, dropped, n_tokens, sched, frames))
    return examples


def _drop_first_turn(alignment: Alignment) -> Alignment:
    turns = []
    for at in alignment.turns[1:]:
        toks = [AlignedToken(t.turn_idx - 1, t.token_idx, t.segment, t.word, t.onset_s, t.frame)
                for t in at.tokens]
        turns.append(AlignedTurn(at.turn_idx - 1, at.turn, toks, at.end_s))
    return Alignment(turns, alignment.tb)


def build_dataset(scripts: Iterable[ConversationScript], seed: int, tb: TimeBase = DEFAULT_TIMEBASE,
                  cfg: Optional[SynthConfig] = None) -> List[TrainingExample]:
    out: List[TrainingExample] = []
    for s in scripts:
        out.extend(build_training_examples(s, seed, tb, cfg))
    return out


def write_dataset(examples: Sequence[TrainingExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


def validate_dataset_record(rec: dict) -> List[str]:
    """Problems with one dataset line (empty when it is well formed)."""
    problems = []
    if rec["i_ret"] != rec["lead_frame"] - 1:
        problems.append(f"i_ret {rec['i_ret']} != lead_frame - 1 ({rec['lead_frame'] - 1})")
    if not 0.0 <= rec["d_prime_s"] <= rec["d_lead_s"]:
        problems.append(f"d_prime_s {rec['d_prime_s']} outside [0, d_lead_s]")
    sched = rec["schedule"]
    if rec["dropout"] and sched["len"] != 1:
        problems.append("dropout example must inject exactly one step")
    return problems


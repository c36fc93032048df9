"""Front-end generators driven by the engine, one step per frame."""

from __future__ import annotations

from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .backends import TranscriptContext, TranscriptTurn
from .datasynth import (
    Alignment,
    AlignmentConfig,
    ConversationScript,
    align_script,
    place_ret,
    render_frames,
)
from .timebase import DEFAULT_TIMEBASE, TimeBase
from .tokens import DEFAULT_AUDIO_VOCAB, DEFAULT_NUM_CODEBOOKS, StepInput, TextToken, TokenFrame


class Generator(Protocol):
    def step(self, h: StepInput, frame: int) -> Tuple[TextToken, tuple]:
        """Model text token and model audio codes for ``frame``."""


class ReplayGenerator:
    """Replays fixed model channels regardless of its input."""

    def __init__(self, frames: Sequence[TokenFrame]):
        self.frames = list(frames)
        self.inserted: List[StepInput] = []

    def step(self, h: StepInput, frame: int) -> Tuple[TextToken, tuple]:
        if not 0 <= frame < len(self.frames):
            raise IndexError(f"no scripted output for frame {frame}")
        f = self.frames[frame]
        return f.model_text, f.model_audio

    def ingest(self, h: StepInput) -> None:
        """Consume an extra spliced temporal step (insertive injection)."""
        self.inserted.append(h)

    def user_feed(self) -> List[TokenFrame]:
        return [TokenFrame(f.frame, user_audio=f.user_audio, model_audio=(0,) * len(f.user_audio))
                for f in self.frames]


class ScriptedGenerator(ReplayGenerator):
    """Replays a conversation script with per-token frame alignment."""

    def __init__(self, script: ConversationScript, rng: np.random.Generator,
                 tb: TimeBase = DEFAULT_TIMEBASE, align_cfg: Optional[AlignmentConfig] = None,
                 alignment: Optional[Alignment] = None, num_codebooks: int = DEFAULT_NUM_CODEBOOKS,
                 audio_vocab: int = DEFAULT_AUDIO_VOCAB):
        align_cfg = align_cfg or AlignmentConfig()
        self.script = script
        self.tb = tb
        self.alignment = alignment or align_script(script, tb, align_cfg)
        super().__init__(render_frames(script, self.alignment, rng, tb, num_codebooks=num_codebooks,
                                       audio_vocab=audio_vocab, trailing_s=align_cfg.trailing_s))

    def references(self) -> List[str]:
        return [self.script.turns[k].reference for k in self.script.rag_turn_indices()]

    def transcript(self, cutoff_s: float) -> TranscriptContext:
        """Words spoken before ``cutoff_s``, standing in for the streaming recognizer."""
        turns = []
        for at in self.alignment.turns:
            words = [t.word for t in at.tokens if t.onset_s < cutoff_s]
            if words:
                turns.append(TranscriptTurn(at.turn.speaker, " ".join(words), min(at.end_s, cutoff_s)))
        return TranscriptContext(tuple(turns), cutoff_s)

    def meta(self) -> dict:
        """Per-turn timing facts the metrics need, recorded in the trace header."""
        turns = []
        user_end = None
        for at in self.alignment.turns:
            if at.turn.speaker == "user":
                user_end = at.end_s
                continue
            if at.turn.keyword is None:
                continue
            rec = {
                "turn_idx": at.turn_idx,
                "user_end_s": user_end,
                "keyword": at.turn.keyword,
                "aliases": list(at.turn.aliases),
                "response": at.turn.spoken_text(),
                "words": [[t.word, t.onset_s] for t in at.tokens],
                "rag": at.turn.is_rag,
            }
            if at.turn.is_rag:
                rec["ret_frame"] = place_ret(at)
                rec["lead_frame"] = at.lead_frame
                rec["body_onset_frame"] = at.body_onset_frame
            turns.append(rec)
        return {"script_id": self.script.script_id, "frame_rate_hz": self.tb.frame_rate_hz, "turns": turns}

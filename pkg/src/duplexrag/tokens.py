"""Dual-channel token frames and temporal-input composition.

Every frame carries one model text token, ``Q`` model audio codebook ids and
``Q`` user audio codebook ids. The temporal input at step ``i`` sums the text
embedding, the layer-1 audio embedding of both roles at step ``i``, and the
layer-2..Q audio embeddings of both roles at step ``i - 1`` (the acoustic
delay). Step ``-1`` lookups resolve to a dedicated "initial" row of each
audio table.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_DIM = 16
DEFAULT_NUM_CODEBOOKS = 8
DEFAULT_TEXT_VOCAB = 1024
DEFAULT_AUDIO_VOCAB = 256

# Audio id 0 is the silence code; a frame whose ids are all AUDIO_PAD is padding.
AUDIO_PAD = 0

MODEL, USER = 0, 1
ROLES = ("model", "user")


class TokenKind(enum.Enum):
    WORD = "WORD"
    PAD = "PAD"
    RET = "RET"


@dataclass(frozen=True)
class TextToken:
    kind: TokenKind
    id: Optional[int] = None

    def __post_init__(self):
        if self.kind is TokenKind.WORD:
            if self.id is None or self.id < 0:
                raise ValueError(f"WORD token needs a non-negative id, got {self.id!r}")
        elif self.id is not None:
            raise ValueError(f"{self.kind.value} token carries no id")

    @classmethod
    def word(cls, idx: int) -> "TextToken":
        return cls(TokenKind.WORD, int(idx))

    @property
    def is_ret(self) -> bool:
        return self.kind is TokenKind.RET

    def to_json(self):
        return self.id if self.kind is TokenKind.WORD else self.kind.value

    @classmethod
    def from_json(cls, value) -> "TextToken":
        if isinstance(value, str):
            return PAD if value == "PAD" else RET if value == "RET" else _bad_token(value)
        return cls.word(value)

    def __repr__(self):
        return f"WORD({self.id})" if self.kind is TokenKind.WORD else self.kind.value


def _bad_token(value):
    raise ValueError(f"unknown text token {value!r}")


PAD = TextToken(TokenKind.PAD)
RET = TextToken(TokenKind.RET)


def silent_audio(num_codebooks: int = DEFAULT_NUM_CODEBOOKS) -> tuple:
    return (AUDIO_PAD,) * num_codebooks


def is_padding_audio(codes: Sequence[int]) -> bool:
    return all(c == AUDIO_PAD for c in codes)


@dataclass(frozen=True)
class TokenFrame:
    """One 80 ms step of the dual-channel stream."""

    frame: int
    model_text: TextToken = PAD
    model_audio: tuple = field(default_factory=silent_audio)
    user_audio: tuple = field(default_factory=silent_audio)

    def __post_init__(self):
        object.__setattr__(self, "model_audio", tuple(int(c) for c in self.model_audio))
        object.__setattr__(self, "user_audio", tuple(int(c) for c in self.user_audio))
        if len(self.model_audio) != len(self.user_audio):
            raise ValueError("model and user audio must have the same number of codebooks")
        if self.frame < 0:
            raise ValueError(f"frame index must be non-negative, got {self.frame}")

    def to_record(self) -> dict:
        return {
            "frame": self.frame,
            "model_text": self.model_text.to_json(),
            "model_audio": list(self.model_audio),
            "user_audio": list(self.user_audio),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TokenFrame":
        return cls(
            frame=int(rec["frame"]),
            model_text=TextToken.from_json(rec["model_text"]),
            model_audio=tuple(rec["model_audio"]),
            user_audio=tuple(rec["user_audio"]),
        )


@dataclass(frozen=True, eq=False)
class EmbeddingTables:
    """Toy embedding tables.

    ``text`` has ``text_vocab + 2`` rows: word ids, then PAD, then RET.
    ``audio`` has shape ``(2, Q, audio_vocab + 1, dim)`` indexed by role,
    layer and codebook id; the last row of every table is the initial-token
    embedding used for step ``-1``.
    """

    text: np.ndarray
    audio: np.ndarray

    def __post_init__(self):
        text = np.array(self.text, dtype=np.float64)
        audio = np.array(self.audio, dtype=np.float64)
        if text.ndim != 2 or audio.ndim != 4 or audio.shape[0] != 2:
            raise ValueError("text must be (V+2, dim) and audio (2, Q, A+1, dim)")
        if text.shape[1] != audio.shape[3]:
            raise ValueError("all tables must share the output dimension")
        if text.shape[0] < 3 or audio.shape[2] < 2:
            raise ValueError("tables are too small to hold reserved rows")
        text.setflags(write=False)
        audio.setflags(write=False)
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "audio", audio)

    @property
    def dim(self) -> int:
        return self.text.shape[1]

    @property
    def num_codebooks(self) -> int:
        return self.audio.shape[1]

    @property
    def text_vocab_size(self) -> int:
        return self.text.shape[0] - 2

    @property
    def audio_vocab_size(self) -> int:
        return self.audio.shape[2] - 1

    @property
    def initial_audio_id(self) -> int:
        return self.audio_vocab_size

    @classmethod
    def random(cls, seed: int, dim: int = DEFAULT_DIM, num_codebooks: int = DEFAULT_NUM_CODEBOOKS,
               text_vocab: int = DEFAULT_TEXT_VOCAB, audio_vocab: int = DEFAULT_AUDIO_VOCAB):
        rng = np.random.default_rng(seed)
        text = rng.standard_normal((text_vocab + 2, dim))
        audio = rng.standard_normal((2, num_codebooks, audio_vocab + 1, dim))
        return cls(text, audio)

    @classmethod
    def zeros(cls, dim: int = DEFAULT_DIM, num_codebooks: int = DEFAULT_NUM_CODEBOOKS,
              text_vocab: int = DEFAULT_TEXT_VOCAB, audio_vocab: int = DEFAULT_AUDIO_VOCAB):
        return cls(np.zeros((text_vocab + 2, dim)), np.zeros((2, num_codebooks, audio_vocab + 1, dim)))

    def __add__(self, other: "EmbeddingTables") -> "EmbeddingTables":
        return EmbeddingTables(self.text + other.text, self.audio + other.audio)

    def text_row(self, token: TextToken) -> np.ndarray:
        if token.kind is TokenKind.PAD:
            return self.text[self.text_vocab_size]
        if token.kind is TokenKind.RET:
            return self.text[self.text_vocab_size + 1]
        if not 0 <= token.id < self.text_vocab_size:
            raise ValueError(f"word id {token.id} outside [0, {self.text_vocab_size})")
        return self.text[token.id]

    def text_index(self, token: TextToken) -> int:
        if token.kind is TokenKind.PAD:
            return self.text_vocab_size
        if token.kind is TokenKind.RET:
            return self.text_vocab_size + 1
        return token.id


@dataclass(frozen=True, eq=False)
class StepInput:
    h: np.ndarray
    frame: int

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64)
        if not np.all(np.isfinite(h)):
            raise ValueError(f"non-finite entry in step input at frame {self.frame}")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)


def _check_audio(codes: Sequence[int], tables: EmbeddingTables, what: str) -> np.ndarray:
    arr = np.asarray(codes, dtype=np.int64)
    if arr.shape != (tables.num_codebooks,):
        raise ValueError(f"{what} has {arr.size} codebooks, tables expect {tables.num_codebooks}")
    if arr.min() < 0 or arr.max() >= tables.audio_vocab_size:
        raise ValueError(f"{what} ids must lie in [0, {tables.audio_vocab_size})")
    return arr


def compose_step_input(frames: Sequence[TokenFrame], tables: EmbeddingTables, i: int) -> StepInput:
    """Temporal input vector for step ``i``."""
    if not 0 <= i < len(frames):
        raise ValueError(f"frame index {i} out of range for {len(frames)} frames")
    cur = frames[i]
    q = tables.num_codebooks
    layers = np.arange(1, q)
    h = tables.text_row(cur.model_text).copy()
    for role, attr in ((MODEL, "model_audio"), (USER, "user_audio")):
        now = _check_audio(getattr(cur, attr), tables, attr)
        h += tables.audio[role, 0, now[0]]
        if i == 0:
            prev = np.full(q, tables.initial_audio_id)
        else:
            prev = _check_audio(getattr(frames[i - 1], attr), tables, attr)
        h += tables.audio[role, layers, prev[1:]].sum(axis=0)
    return StepInput(h, i)


def find_ret(frames: Sequence[TokenFrame], start: int = 0) -> Optional[int]:
    """Earliest frame index >= ``start`` whose model text is RET."""
    for k in range(max(start, 0), len(frames)):
        if frames[k].model_text.is_ret:
            return frames[k].frame
    return None

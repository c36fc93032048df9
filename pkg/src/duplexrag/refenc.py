"""Deterministic toy reference encoder.

A reference document is tokenized against the fixed vocabulary, embedded with
the text table, mean-pooled over windows of ``ratio`` tokens and passed through
a frozen seeded linear projection. The output length is ``ceil(n / ratio)``,
which is the only property the engine consumes: it sets how many frames the
injection window spans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .timebase import DEFAULT_TIMEBASE, TimeBase, frames_to_seconds
from .tokens import EmbeddingTables, TextToken
from .vocab import Vocabulary, default_vocabulary

DEFAULT_RATIO = 4
ALTERNATE_RATIO = 8
DEFAULT_P_DROP = 0.2


@dataclass(frozen=True)
class ReferenceDoc:
    """Reference text plus its vocabulary ids (derived from the text if omitted)."""

    text: str
    tokens: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.tokens is None:
            object.__setattr__(self, "tokens", tuple(default_vocabulary().encode(self.text)))
        else:
            object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    @classmethod
    def from_text(cls, text: str, vocab: Optional[Vocabulary] = None) -> "ReferenceDoc":
        vocab = vocab or default_vocabulary()
        return cls(text, tuple(vocab.encode(text)))

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True, eq=False)
class ReferenceEmbedding:
    """Projected reference vectors, one per injection step."""

    vectors: np.ndarray
    source_len: int
    ratio: int
    dropped: bool = False

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("reference vectors must be a 2-D array (l, dim)")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    def __len__(self):
        return self.length

    def duration_s(self, tb: TimeBase = DEFAULT_TIMEBASE) -> float:
        return frames_to_seconds(self.length, tb)


@dataclass(frozen=True, eq=False)
class Projection:
    """Frozen linear map applied to pooled token embeddings."""

    weight: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("projection must be a square matrix")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)

    @classmethod
    def seeded(cls, seed: int, dim: int) -> "Projection":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((dim, dim)) / math.sqrt(dim))

    @classmethod
    def identity(cls, dim: int) -> "Projection":
        return cls(np.eye(dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T


@dataclass(frozen=True, eq=False)
class DropoutVector:
    """Stand-in for the learned vector injected when a reference is dropped."""

    h_dropout: np.ndarray

    def __post_init__(self):
        v = np.array(self.h_dropout, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "h_dropout", v)

    @classmethod
    def seeded(cls, seed: int, dim: int) -> "DropoutVector":
        # offset keeps this stream apart from the projection drawn from the same seed
        return cls(np.random.default_rng([seed, 1]).standard_normal(dim))


def compressed_length(n: int, ratio: int) -> int:
    if ratio < 1:
        raise ValueError(f"compression ratio must be >= 1, got {ratio}")
    if n < 0:
        raise ValueError("token count must be non-negative")
    return -(-n // ratio)


def encode_reference(doc: ReferenceDoc, tables: EmbeddingTables, c: int = DEFAULT_RATIO,
                     tb: TimeBase = DEFAULT_TIMEBASE, projection: Optional[Projection] = None
                     ) -> ReferenceEmbedding:
    """Embed, window-mean-pool by ``c`` and project a reference document.

    ``tb`` is accepted so callers can ask the result for its duration; the
    vectors themselves do not depend on it.
    """
    if c is None or int(c) != c or c < 1:
        raise ValueError(f"compression ratio must be a positive integer, got {c!r}")
    c = int(c)
    n = len(doc.tokens)
    l = compressed_length(n, c)
    if projection is None:
        projection = Projection.identity(tables.dim)
    if n == 0:
        return ReferenceEmbedding(np.zeros((0, tables.dim)), 0, c)
    rows = np.stack([tables.text_row(TextToken.word(t)) for t in doc.tokens])
    pooled = np.stack([rows[k * c:min((k + 1) * c, n)].mean(axis=0) for k in range(l)])
    return ReferenceEmbedding(projection(pooled), n, c)


def apply_reference_dropout(emb: ReferenceEmbedding, p_drop: float, rng: np.random.Generator,
                            dv: DropoutVector) -> ReferenceEmbedding:
    """Replace the whole document by the dropout vector with probability ``p_drop``.

    Exactly one uniform draw is consumed per call.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop!r}")
    if rng.random() < p_drop:
        return dropout_embedding(emb.source_len, emb.ratio, dv)
    return emb


def dropout_embedding(source_len: int, ratio: int, dv: DropoutVector) -> ReferenceEmbedding:
    return ReferenceEmbedding(dv.h_dropout[None, :], source_len, ratio, dropped=True)


class ReferenceEncoder:
    """Bundles tables, projection, ratio and dropout vector for one run."""

    def __init__(self, tables: EmbeddingTables, ratio: int = DEFAULT_RATIO, seed: int = 0,
                 vocab: Optional[Vocabulary] = None, tb: TimeBase = DEFAULT_TIMEBASE):
        if vocab is not None and vocab.size > tables.text_vocab_size:
            raise ValueError("vocabulary does not fit in the text embedding table")
        self.tables = tables
        self.ratio = ratio
        self.vocab = vocab or default_vocabulary()
        self.tb = tb
        self.projection = Projection.seeded(seed, tables.dim)
        self.dropout_vector = DropoutVector.seeded(seed, tables.dim)

    def encode_text(self, text: str) -> ReferenceEmbedding:
        return encode_reference(ReferenceDoc.from_text(text, self.vocab), self.tables,
                                self.ratio, self.tb, self.projection)

    def encode(self, doc: ReferenceDoc) -> ReferenceEmbedding:
        return encode_reference(doc, self.tables, self.ratio, self.tb, self.projection)

    def dropped(self, source_len: int = 0) -> ReferenceEmbedding:
        return dropout_embedding(source_len, self.ratio, self.dropout_vector)

"""Fixed word vocabulary shared by scripts, references and keyword matching."""

from __future__ import annotations

import string
from functools import lru_cache
from importlib import resources
from typing import Iterable, List, Sequence

_STRIP = string.punctuation + "‘’“”"


def normalize_words(text: str) -> List[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    out = []
    for raw in text.lower().split():
        w = raw.strip(_STRIP)
        if w:
            out.append(w)
    return out


class Vocabulary:
    """Word list with a trailing out-of-vocabulary bucket."""

    def __init__(self, words: Iterable[str]):
        self.words: List[str] = []
        self._index = {}
        for w in words:
            w = w.strip().lower()
            if w and w not in self._index:
                self._index[w] = len(self.words)
                self.words.append(w)

    @property
    def oov_id(self) -> int:
        return len(self.words)

    @property
    def size(self) -> int:
        return len(self.words) + 1

    def id_of(self, word: str) -> int:
        return self._index.get(word, self.oov_id)

    def encode(self, text: str) -> List[int]:
        return [self.id_of(w) for w in normalize_words(text)]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.words[i] if i < len(self.words) else "<unk>" for i in ids]


@lru_cache(maxsize=1)
def default_vocabulary() -> Vocabulary:
    text = resources.files("duplexrag").joinpath("data/vocab.txt").read_text(encoding="utf-8")
    return Vocabulary(text.split())

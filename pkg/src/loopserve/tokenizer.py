"""Whitespace tokenization against a fixed vocabulary file."""

from __future__ import annotations

import json

from .errors import InvalidConfig

UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"


class Vocab:
    """JSON array of strings; a word's id is its index. Out-of-vocabulary
    words map to the reserved unknown token."""

    def __init__(self, words):
        self.words = list(words)
        self._index = {w: i for i, w in enumerate(self.words)}
        if len(self._index) != len(self.words):
            raise InvalidConfig("vocabulary contains duplicate words")
        if UNK_TOKEN not in self._index or EOS_TOKEN not in self._index:
            raise InvalidConfig(f"vocabulary must contain {UNK_TOKEN} and {EOS_TOKEN}")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def unk_id(self) -> int:
        return self._index[UNK_TOKEN]

    @property
    def eos_id(self) -> int:
        return self._index[EOS_TOKEN]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self._index.get(w, unk) for w in text.split()]

    def decode(self, ids) -> str:
        n = len(self.words)
        return " ".join(self.words[i] if 0 <= i < n else UNK_TOKEN for i in ids)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.words, fh)

    @staticmethod
    def load(path: str) -> "Vocab":
        with open(path) as fh:
            words = json.load(fh)
        if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
            raise InvalidConfig("vocabulary file must be a JSON array of strings")
        return Vocab(words)


def build_vocab(texts) -> Vocab:
    """Reserved tokens first, then every whitespace word in sorted order."""
    seen = set()
    for text in texts:
        seen.update(text.split())
    seen.discard(UNK_TOKEN)
    seen.discard(EOS_TOKEN)
    return Vocab([UNK_TOKEN, EOS_TOKEN] + sorted(seen))

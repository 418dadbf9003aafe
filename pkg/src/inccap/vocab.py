"""Tokenization and the append-only vocabulary shared by every task."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

START, END, PAD, UNK = "<start>", "<end>", "<pad>", "<unk>"
SPECIALS = (START, END, PAD, UNK)
START_ID, END_ID, PAD_ID, UNK_ID = 0, 1, 2, 3

_HEADER = "#vocab-version"
# apostrophes survive only between two word characters ("dog's", not "'dog'")
_STRIP = re.compile(r"(?!(?<=\w)'(?=\w))[^\w\s]|_")


def tokenize(caption: str) -> list[str]:
    """Lowercase, drop punctuation (keeping intra-word apostrophes), split on whitespace."""
    return _STRIP.sub(" ", caption.lower()).split()


def build_task_vocab(captions: Iterable[str], min_count: int = 4) -> set[str]:
    """Tokens whose frequency over ``captions`` is at least ``min_count``."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts = Counter(tok for cap in captions for tok in tokenize(cap))
    return {tok for tok, c in counts.items() if c >= min_count}


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...] = SPECIALS
    version: int = 0
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("special tokens must occupy indices 0-3")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def words(self) -> set[str]:
        """Non-special tokens."""
        return set(self.tokens[4:])

    def encode(self, tokens: Sequence[str], wrap: bool = False) -> list[int]:
        ids = [self.index.get(t, UNK_ID) for t in tokens]
        return [START_ID, *ids, END_ID] if wrap else ids

    def decode(self, ids: Iterable[int], strip_specials: bool = False) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise IndexError(f"token index {i} outside vocabulary of size {len(self)}")
            if strip_specials and i < len(SPECIALS):
                continue
            out.append(self.tokens[i])
        return out

    def save(self, path) -> None:
        lines = [f"{_HEADER} {self.version}", *self.tokens]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        head = lines[0].split()
        if len(head) != 2 or head[0] != _HEADER:
            raise ValueError(f"{path}: missing vocabulary header")
        return cls(tuple(lines[1:]), int(head[1]))


def accumulate(old: Vocabulary, new_tokens: Iterable[str]) -> Vocabulary:
    """Union ``old`` with ``new_tokens``; unseen tokens are appended in sorted order.

    Existing indices never move, so the size obeys
    ``len(result) == len(old) + len(new) - len(old & new)`` (specials counted in ``old``).
    """
    fresh = sorted(set(new_tokens) - set(old.tokens))
    return Vocabulary(old.tokens + tuple(fresh), old.version + 1)

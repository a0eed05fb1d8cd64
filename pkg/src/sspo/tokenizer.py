"""Closed word/tag-piece tokenizer.

Text is split into structural tags, special tokens, words, single
punctuation marks and newlines. Spaces are not tokens: ``decode`` puts a
single space before a word that follows a word or punctuation, which makes
``encode(decode(ids)) == ids`` for every id sequence.
"""

from __future__ import annotations

import re
from typing import Iterable, Sequence

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
SPECIALS = (PAD, EOS, UNK)
TAGS = tuple(
    f"<{c}{t}>"
    for t in ("think", "rhythm", "conduction", "morphology", "impression", "answer")
    for c in ("", "/")
)
PUNCT = (".", ",", ";", ":", "-", "/", "%", "(", ")")
SPACE_AFTER = frozenset({".", ",", ";", ":", ")", "%"})
NEWLINE = "\n"
DIGITS = tuple("0123456789")

_PIECE_RE = re.compile(r"<[^<>\s]+>|[A-Za-z]+|[0-9]|\n|[^\sA-Za-z0-9]")


class Tokenizer:
    def __init__(self, words: Iterable[str]):
        base = list(SPECIALS) + list(TAGS) + [NEWLINE] + list(PUNCT) + list(DIGITS)
        extra = sorted({w for w in words if w and w not in base})
        for w in extra:
            if not re.fullmatch(r"[A-Za-z]+", w):
                raise ValueError(f"vocabulary words must be alphabetic, got {w!r}")
        self.pieces: list[str] = base + extra
        self.index = {p: i for i, p in enumerate(self.pieces)}
        self.pad_id = self.index[PAD]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.pieces)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        words: set[str] = set()
        for t in texts:
            words.update(p for p in _PIECE_RE.findall(t) if p.isalpha())
        return cls(words)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(p, self.unk_id) for p in _PIECE_RE.findall(text)]

    def decode(self, ids: Sequence[int]) -> str:
        out: list[str] = []
        prev = None
        for i in ids:
            piece = self.pieces[int(i)]
            if piece.isalnum() and prev is not None and (prev.isalnum() or prev in SPACE_AFTER):
                out.append(" ")
            out.append(piece)
            prev = piece
        return "".join(out)

    def strip_eos(self, ids: Sequence[int]) -> list[int]:
        ids = list(ids)
        if self.eos_id in ids:
            ids = ids[: ids.index(self.eos_id)]
        return ids

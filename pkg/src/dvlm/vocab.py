"""Word-level vocabulary with reserved special tokens at the top of the id range."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

MASK = "[M]"
FILL = "[S]"
FIM = "[FIM]"
PAD = "[PAD]"
BOS = "[BOS]"
EOS = "[EOS]"
SPECIALS = (MASK, FILL, FIM, PAD, BOS, EOS)


@dataclass(frozen=True)
class Vocab:
    words: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        words = tuple(self.words)
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        clash = set(words) & set(SPECIALS)
        if clash:
            raise ValueError(f"special tokens cannot be ordinary words: {sorted(clash)}")
        object.__setattr__(self, "words", words)
        tokens = words + SPECIALS
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(tokens)})

    @property
    def size(self) -> int:
        return len(self.words) + len(SPECIALS)

    def __len__(self) -> int:
        return self.size

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"unknown token {token!r}") from None

    @property
    def mask_id(self) -> int:
        return self._index[MASK]

    @property
    def fill_id(self) -> int:
        return self._index[FILL]

    @property
    def fim_id(self) -> int:
        return self._index[FIM]

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self._index[s] for s in SPECIALS)

    def token(self, idx: int) -> str:
        if not 0 <= idx < self.size:
            raise IndexError(f"token id {idx} outside vocabulary of size {self.size}")
        if idx < len(self.words):
            return self.words[idx]
        return SPECIALS[idx - len(self.words)]

    def encode(self, text: str | Sequence[str]) -> list[int]:
        """Whitespace tokenization; special tokens are written in bracket form."""
        parts = text.split() if isinstance(text, str) else list(text)
        return [self.id(p) for p in parts]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.token(int(i)) for i in ids)

    def pad_answer(self, ids: Sequence[int], length: int) -> list[int]:
        """Append one [EOS] then right-pad with [PAD] to ``length``.

        Content longer than ``length - 1`` is truncated (the [EOS] is dropped
        only if the content alone fills the sequence).
        """
        out = list(ids)[:length]
        if len(out) < length:
            out.append(self.eos_id)
        out.extend([self.pad_id] * (length - len(out)))
        return out

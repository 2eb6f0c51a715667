"""Greedy longest-match subword tokenizer over a word + character vocabulary."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
RESERVED = (PAD, CLS, SEP, MASK, UNK)
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = range(5)


class Vocab:
    def __init__(self, tokens: Iterable[str], lowercase: bool = True):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED}")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        if len(self.ids) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.lowercase = lowercase
        self.max_piece = max((len(t) for t in tokens[len(RESERVED):]), default=1)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens and self.lowercase == other.lowercase

    def id(self, token: str) -> int:
        return self.ids.get(token, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, lowercase: bool = True) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines, lowercase)


@dataclass(frozen=True)
class TokenizedSegment:
    token_ids: tuple[int, ...]
    is_first_subword: tuple[bool, ...]
    word_index: tuple[int, ...]  # source word of each piece

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def word_count(self) -> int:
        return sum(self.is_first_subword)


def build_vocab(corpus: Iterable[str], max_size: int, lowercase: bool = True) -> Vocab:
    """Reserved tokens, then frequent whole words, then single characters as fallback.

    Ordering within each group is by descending frequency, ties lexicographic.
    Single characters get budget priority so every corpus character stays
    representable; words fill what remains.
    """
    if max_size < len(RESERVED) + 1:
        raise ValueError(f"max_size must be at least {len(RESERVED) + 1}, got {max_size}")
    words: Counter = Counter()
    chars: Counter = Counter()
    for text in corpus:
        if lowercase:
            text = text.lower()
        for w in text.split():
            words[w] += 1
            chars.update(w)
    if not words:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    def ranked(counter):
        return [t for t, _ in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))]

    budget = max_size - len(RESERVED)
    char_list = ranked(chars)[:budget]
    char_set = set(char_list)
    multi = set([w for w in ranked(words) if len(w) > 1][: budget - len(char_list)])
    # single-character words rank with the words; they are already budgeted as characters
    ordered = ranked({w: c for w, c in words.items() if w in multi or w in char_set})
    seen = set(ordered)
    tail = [c for c in char_list if c not in seen]
    return Vocab(list(RESERVED) + ordered + tail, lowercase)


def tokenize(text: str, vocab: Vocab) -> TokenizedSegment:
    """Whole word if in vocabulary, else greedy longest-prefix pieces; unknown chars -> [UNK]."""
    if vocab.lowercase:
        text = text.lower()
    ids: list[int] = []
    first: list[bool] = []
    owner: list[int] = []
    for wi, word in enumerate(text.split()):
        pos = 0
        start = True
        while pos < len(word):
            piece_id = UNK_ID
            step = 1
            for end in range(min(len(word), pos + vocab.max_piece), pos, -1):
                pid = vocab.ids.get(word[pos:end])
                if pid is not None and pid >= len(RESERVED):
                    piece_id, step = pid, end - pos
                    break
            ids.append(piece_id)
            first.append(start)
            owner.append(wi)
            start = False
            pos += step
    return TokenizedSegment(tuple(ids), tuple(first), tuple(owner))

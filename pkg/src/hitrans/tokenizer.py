"""Lowercasing, basic splitting and greedy WordPiece tokenisation."""
from __future__ import annotations

import hashlib
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import ConfigError, SchemaError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
CONT = "##"

_PUNCT = frozenset(string.punctuation)


class Vocab:
    """Immutable token inventory; line number in the vocab file is the id."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise SchemaError(f"vocab must start with {list(SPECIALS)}, got {tokens[:4]}")
        index: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise SchemaError(f"duplicate vocab token {tok!r} at line {i + 1}")
            index[tok] = i
        self._tokens = tuple(tokens)
        self._index = index

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    def __hash__(self) -> int:
        return hash(self._tokens)

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self._tokens).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocab:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass(frozen=True)
class TokenizerConfig:
    max_len: int = 512
    lowercase: bool = True

    def __post_init__(self):
        if self.max_len < 3:
            raise ConfigError(f"max_len must be >= 3, got {self.max_len}")


@dataclass(frozen=True)
class Encoding:
    ids: list[int]
    mask: list[bool]


def basic_split(text: str, lowercase: bool = True) -> list[str]:
    """Split on whitespace; ASCII punctuation marks become their own tokens."""
    if lowercase:
        text = text.lower()
    words: list[str] = []
    for chunk in text.split():
        buf = []
        for ch in chunk:
            if ch in _PUNCT:
                if buf:
                    words.append("".join(buf))
                    buf = []
                words.append(ch)
            else:
                buf.append(ch)
        if buf:
            words.append("".join(buf))
    return words


def wordpiece_tokenize(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match-first split of a single word."""
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            cand = word[start:end]
            if start > 0:
                cand = CONT + cand
            if cand in vocab:
                found = cand
                break
            end -= 1
        if found is None:
            return [UNK]
        pieces.append(found)
        start = end
    return pieces


def encode(text: str, vocab: Vocab, cfg: TokenizerConfig = TokenizerConfig(),
           pool_specials: bool = True) -> Encoding:
    """Tokenise ``text`` to ids framed by [CLS]/[SEP].

    The tail of an over-long utterance is dropped. ``mask`` marks the
    positions eligible for max-pooling: every position, or only the word
    pieces when ``pool_specials`` is false.
    """
    pieces: list[str] = []
    for word in basic_split(text, cfg.lowercase):
        pieces.extend(wordpiece_tokenize(word, vocab))
    pieces = pieces[: cfg.max_len - 2]
    ids = [CLS_ID] + [vocab.id(p) for p in pieces] + [SEP_ID]
    if pool_specials:
        mask = [True] * len(ids)
    else:
        mask = [False] + [True] * len(pieces) + [False]
    return Encoding(ids, mask)


def _char_pieces(word: str) -> list[str]:
    return [word[0]] + [CONT + ch for ch in word[1:]]


def build_vocab(corpus: Iterable[str], target_size: int, min_freq: int = 1,
                lowercase: bool = True) -> Vocab:
    """Frequency-ranked whole-word vocab backed by character pieces.

    Words under ``min_freq`` (or cut by ``target_size``) are covered by
    single-character pieces, so every corpus word tokenises without [UNK].
    Character pieces take priority over rare whole words when space is
    short; if the pieces alone exceed ``target_size`` the vocab grows past it.
    """
    if target_size <= len(SPECIALS):
        raise ConfigError(f"target_size must exceed {len(SPECIALS)}, got {target_size}")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(basic_split(text, lowercase))
    if not counts:
        raise ConfigError("cannot build a vocab from an empty corpus")

    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    eligible = [w for w in ranked if counts[w] >= min_freq and w not in SPECIALS]

    def pieces_for(kept: set[str]) -> list[str]:
        seen: dict[str, None] = {}
        for w in ranked:
            if w in kept:
                continue
            for p in _char_pieces(w):
                seen.setdefault(p, None)
        return sorted(p for p in seen if p not in kept)

    room = target_size - len(SPECIALS)
    k = len(eligible)
    while True:
        kept = set(eligible[:k])
        chars = pieces_for(kept)
        if k + len(chars) <= room or k == 0:
            break
        k -= 1
    tokens = list(SPECIALS) + eligible[:k] + [c for c in chars if c not in SPECIALS]
    return Vocab(tokens)

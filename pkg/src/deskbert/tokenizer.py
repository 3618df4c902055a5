"""Cased WordPiece tokenization with per-token word indices.

Every encoding keeps, for each subword, the index of the whitespace/punctuation
word it came from. Whole word masking and first-subword tagging both rely on it.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigurationError, DataError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
NUM_SPECIALS = len(SPECIAL_TOKENS)

# word_id carried by [CLS], [SEP] and [PAD]
SPECIAL_WORD_ID = -1

MAX_WORD_CHARS = 100


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    id_of: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIALS]) != SPECIAL_TOKENS:
            raise ConfigurationError(f"vocab must start with {SPECIAL_TOKENS}")
        id_of = {}
        for i, tok in enumerate(self.tokens):
            if tok in id_of:
                raise ConfigurationError(f"duplicate token {tok!r} at id {i}")
            id_of[tok] = i
        object.__setattr__(self, "id_of", id_of)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    @property
    def specials(self) -> tuple[str, ...]:
        return self.tokens[:NUM_SPECIALS]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


@dataclass(frozen=True)
class Encoding:
    token_ids: tuple[int, ...]
    word_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]

    def __post_init__(self):
        n = len(self.token_ids)
        if len(self.word_ids) != n or len(self.attention_mask) != n:
            raise DataError("token_ids, word_ids and attention_mask must have equal length")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def num_words(self) -> int:
        return len({w for w in self.word_ids if w != SPECIAL_WORD_ID})


def _is_punctuation(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def split_words(text: str) -> list[str]:
    """Split on whitespace, then isolate each punctuation character as its own word."""
    words: list[str] = []
    for chunk in text.split():
        start = 0
        for i, ch in enumerate(chunk):
            if _is_punctuation(ch):
                if i > start:
                    words.append(chunk[start:i])
                words.append(ch)
                start = i + 1
        if start < len(chunk):
            words.append(chunk[start:])
    return words


def build_vocab(corpus: Iterable[str], size: int) -> Vocab:
    """Frequency-ranked vocabulary: specials, whole words, then character pieces.

    Single characters and their ``##`` continuations are reserved room so any
    word made of seen characters stays encodable. When ``size`` is too small
    for all of them, words and pieces compete in frequency order.
    """
    if size < NUM_SPECIALS:
        raise ConfigurationError(f"vocab size must be at least {NUM_SPECIALS}, got {size}")
    word_counts: Counter[str] = Counter()
    for doc in corpus:
        word_counts.update(split_words(doc))
    char_counts: Counter[str] = Counter()
    for word, n in word_counts.items():
        for ch in word:
            char_counts[ch] += n

    def ranked(counts: Counter[str]) -> list[str]:
        return sorted(counts, key=lambda t: (-counts[t], t))

    words = [w for w in ranked(word_counts) if w not in SPECIAL_TOKENS]
    chars = ranked(char_counts)
    pieces = chars + ["##" + c for c in chars]
    budget = size - NUM_SPECIALS

    if budget >= len(pieces):
        n_words = budget - len(pieces)
        candidates = words[:n_words] + pieces
    else:
        candidates = words + pieces

    chosen: list[str] = []
    seen = set(SPECIAL_TOKENS)
    for tok in candidates:
        if len(chosen) == budget:
            break
        if tok not in seen:
            seen.add(tok)
            chosen.append(tok)
    return Vocab(SPECIAL_TOKENS + tuple(chosen))


def wordpiece(word: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match-first segmentation of one word."""
    if len(word) > MAX_WORD_CHARS:
        return [UNK_ID]
    ids: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            piece = word[start:end] if start == 0 else "##" + word[start:end]
            if piece in vocab.id_of:
                match = vocab.id_of[piece]
                break
            end -= 1
        if match is None:
            return [UNK_ID]
        ids.append(match)
        start = end
    return ids


class Tokenizer:
    """Caches per-word segmentations; use for bulk encoding of a corpus."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        self._cache: dict[str, list[int]] = {}

    def encode_words(self, words: Sequence[str]) -> Encoding:
        token_ids: list[int] = []
        word_ids: list[int] = []
        for w_idx, word in enumerate(words):
            pieces = self._cache.get(word)
            if pieces is None:
                pieces = wordpiece(word, self.vocab)
                self._cache[word] = pieces
            token_ids.extend(pieces)
            word_ids.extend([w_idx] * len(pieces))
        return Encoding(tuple(token_ids), tuple(word_ids), (1,) * len(token_ids))

    def encode(self, text: str) -> Encoding:
        return self.encode_words(split_words(text))


def encode(text: str, vocab: Vocab) -> Encoding:
    return Tokenizer(vocab).encode(text)


def decode(enc: Encoding, vocab: Vocab) -> str:
    """Re-join subwords per word, stripping ``##``; specials are dropped."""
    words: list[str] = []
    current = None
    for tok_id, w_id in zip(enc.token_ids, enc.word_ids):
        if w_id == SPECIAL_WORD_ID:
            continue
        piece = vocab.tokens[tok_id]
        if piece.startswith("##"):
            piece = piece[2:]
        if w_id != current:
            words.append(piece)
            current = w_id
        else:
            words[-1] += piece
    return " ".join(words)


def word_spans(enc: Encoding) -> list[tuple[int, int]]:
    """Half-open token ranges, one per content word, in order."""
    spans: list[tuple[int, int]] = []
    current = None
    for i, w_id in enumerate(enc.word_ids):
        if w_id == SPECIAL_WORD_ID:
            current = None
            continue
        if w_id == current:
            spans[-1] = (spans[-1][0], i + 1)
        else:
            spans.append((i, i + 1))
            current = w_id
    return spans


def add_specials(enc: Encoding, max_seq_len: int | None = None) -> Encoding:
    """Wrap content in ``[CLS] ... [SEP]`` and pad to ``max_seq_len``.

    Content is truncated at a word boundary when it does not fit; a single
    word longer than the room is cut mid-word.
    """
    ids = list(enc.token_ids)
    wids = list(enc.word_ids)
    if max_seq_len is not None:
        room = max_seq_len - 2
        if len(ids) > room:
            cut = room
            if cut < len(wids) and cut > 0 and wids[cut] == wids[cut - 1]:
                w = wids[cut]
                first = wids.index(w)
                if first > 0:
                    cut = first
            ids, wids = ids[:cut], wids[:cut]
    ids = [CLS_ID] + ids + [SEP_ID]
    wids = [SPECIAL_WORD_ID] + wids + [SPECIAL_WORD_ID]
    mask = [1] * len(ids)
    if max_seq_len is not None:
        pad = max_seq_len - len(ids)
        ids += [PAD_ID] * pad
        wids += [SPECIAL_WORD_ID] * pad
        mask += [0] * pad
    return Encoding(tuple(ids), tuple(wids), tuple(mask))

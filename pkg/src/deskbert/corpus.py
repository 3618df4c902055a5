"""Document ingestion, keyword filtering, and packing into fixed-length examples."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, CorruptionError
from .tokenizer import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    SPECIAL_WORD_ID,
    Encoding,
    Tokenizer,
    Vocab,
    word_spans,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Document:
    id: str
    text: str


@dataclass(frozen=True)
class PretrainExample:
    encoding: Encoding

    @property
    def num_content(self) -> int:
        return sum(self.encoding.attention_mask) - 2


@dataclass
class PackStats:
    examples: int = 0
    content_tokens: int = 0
    truncated_words: int = 0
    dropped_tokens: int = 0


def read_documents(directory: str | Path) -> Iterator[Document]:
    """Yield one document per blank-line-separated block, files in sorted order."""
    directory = Path(directory)
    for path in sorted(p for p in directory.rglob("*") if p.is_file()):
        if path.suffix == ".bin":
            continue
        block: list[str] = []
        n = 0
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    block.append(line.strip())
                elif block:
                    yield Document(f"{path.name}:{n}", " ".join(block))
                    n += 1
                    block = []
        if block:
            yield Document(f"{path.name}:{n}", " ".join(block))


def read_blocklist(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def filter_documents(docs: Iterable[Document], blocklist: Sequence[str]) -> Iterator[Document]:
    """Drop every document containing a blocklisted keyword (case-insensitive)."""
    keys = [k.casefold() for k in blocklist]
    if any(not k for k in keys):
        raise ConfigurationError("blocklist entries must be non-empty")
    for doc in docs:
        text = doc.text.casefold()
        if not any(k in text for k in keys):
            yield doc


def _finish(tokens: list[int], wids: list[int], max_seq_len: int) -> PretrainExample:
    # renumber words from 0 inside the example
    remap: dict[int, int] = {}
    local = [remap.setdefault(w, len(remap)) for w in wids]
    pad = max_seq_len - len(tokens) - 2
    ids = (CLS_ID, *tokens, SEP_ID) + (PAD_ID,) * pad
    word_ids = (SPECIAL_WORD_ID, *local, SPECIAL_WORD_ID) + (SPECIAL_WORD_ID,) * pad
    mask = (1,) * (len(tokens) + 2) + (0,) * pad
    return PretrainExample(Encoding(ids, word_ids, mask))


def pack_sequences(
    docs: Iterable[Encoding], max_seq_len: int, stats: PackStats | None = None
) -> Iterator[PretrainExample]:
    """Pack per-document encodings into ``[CLS] ... [SEP] [PAD]*`` examples.

    Words never straddle two examples and examples never straddle two
    documents. A word longer than the capacity is truncated and counted in
    ``stats.truncated_words``.
    """
    if max_seq_len < 8:
        raise ConfigurationError(f"max_seq_len must be >= 8, got {max_seq_len}")
    stats = stats if stats is not None else PackStats()
    capacity = max_seq_len - 2
    for enc in docs:
        tokens: list[int] = []
        wids: list[int] = []
        for start, end in word_spans(enc):
            piece = list(enc.token_ids[start:end])
            if len(piece) > capacity:
                stats.truncated_words += 1
                stats.dropped_tokens += len(piece) - capacity
                log.warning("word of %d tokens truncated to %d", len(piece), capacity)
                piece = piece[:capacity]
            if len(tokens) + len(piece) > capacity:
                stats.examples += 1
                stats.content_tokens += len(tokens)
                yield _finish(tokens, wids, max_seq_len)
                tokens, wids = [], []
            tokens.extend(piece)
            wids.extend([enc.word_ids[start]] * len(piece))
        if tokens:
            stats.examples += 1
            stats.content_tokens += len(tokens)
            yield _finish(tokens, wids, max_seq_len)


def shuffle_examples(examples: Sequence[PretrainExample], seed: int) -> list[PretrainExample]:
    order = np.random.default_rng(seed).permutation(len(examples))
    return [examples[i] for i in order]


# -- shard files ------------------------------------------------------------
# record = u32 payload length, then payload:
#   u32 n, n * i32 token_ids, n * i32 word_ids, n * u8 attention_mask


def encode_record(example: PretrainExample) -> bytes:
    enc = example.encoding
    n = len(enc)
    payload = (
        struct.pack("<I", n)
        + np.asarray(enc.token_ids, dtype="<i4").tobytes()
        + np.asarray(enc.word_ids, dtype="<i4").tobytes()
        + np.asarray(enc.attention_mask, dtype="u1").tobytes()
    )
    return struct.pack("<I", len(payload)) + payload


def decode_record(payload: bytes) -> PretrainExample:
    if len(payload) < 4:
        raise CorruptionError("record payload too short")
    (n,) = struct.unpack_from("<I", payload, 0)
    if len(payload) != 4 + 9 * n:
        raise CorruptionError(f"record length {len(payload)} does not match n={n}")
    ids = np.frombuffer(payload, dtype="<i4", count=n, offset=4)
    wids = np.frombuffer(payload, dtype="<i4", count=n, offset=4 + 4 * n)
    mask = np.frombuffer(payload, dtype="u1", count=n, offset=4 + 8 * n)
    return PretrainExample(
        Encoding(tuple(ids.tolist()), tuple(wids.tolist()), tuple(mask.tolist()))
    )


def write_shard(path: str | Path, examples: Iterable[PretrainExample]) -> int:
    n = 0
    with open(path, "wb") as fh:
        for ex in examples:
            fh.write(encode_record(ex))
            n += 1
    return n


def read_shard(path: str | Path) -> list[PretrainExample]:
    data = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise CorruptionError(f"{path}: truncated record header at byte {pos}")
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + length > len(data):
            raise CorruptionError(f"{path}: truncated record at byte {pos}")
        out.append(decode_record(data[pos : pos + length]))
        pos += length
    return out


def write_shards(
    examples: Sequence[PretrainExample], out_dir: str | Path, examples_per_shard: int = 4096
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, start in enumerate(range(0, max(len(examples), 1), examples_per_shard)):
        path = out_dir / f"shard-{i:05d}.bin"
        write_shard(path, examples[start : start + examples_per_shard])
        paths.append(path)
    return paths


def build_examples(
    docs: Iterable[Document],
    vocab: Vocab,
    max_seq_len: int,
    blocklist: Sequence[str] = (),
    seed: int = 42,
    stats: PackStats | None = None,
) -> list[PretrainExample]:
    """Filter, tokenize, pack and shuffle a document stream."""
    tok = Tokenizer(vocab)
    encodings = (tok.encode(d.text) for d in filter_documents(docs, blocklist))
    examples = list(pack_sequences(encodings, max_seq_len, stats))
    return shuffle_examples(examples, seed)

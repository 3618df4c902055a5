"""Synthetic corpora and downstream tasks standing in for the real datasets.

The pretraining language interleaves a deterministic cycle of function words
with topic words; each document sticks to one topic. Topic words are only
predictable up to their topic, which is what lets a pretrained encoder group
them, and the downstream classification task tests exactly that: it is
trained on some words of each topic and tested on the others.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"


def _syllable_words(rng: np.random.Generator, n: int, syllables: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = "".join(rng.choice(list(CONSONANTS)) + rng.choice(list(VOWELS)) for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class Language:
    function_words: list[str]
    topics: list[list[str]]
    names: list[str]

    @classmethod
    def generate(
        cls,
        seed: int = 0,
        n_function: int = 12,
        n_topics: int = 8,
        topic_size: int = 6,
        n_names: int = 2000,
    ) -> "Language":
        rng = np.random.default_rng(seed)
        taken: set[str] = set()
        function = _syllable_words(rng, n_function, 1, taken)
        topics = [_syllable_words(rng, topic_size, 2, taken) for _ in range(n_topics)]
        names = [w.capitalize() for w in _syllable_words(rng, n_names, 3, taken)]
        return cls(function, topics, names)

    def sentence(self, rng: np.random.Generator, topic: int, n_words: int, name_rate: float = 0.03) -> list[str]:
        """Two cycling function words, then a topic word (or, rarely, a name)."""
        j = int(rng.integers(len(self.function_words)))
        words = []
        while len(words) < n_words:
            for _ in range(2):
                words.append(self.function_words[j % len(self.function_words)])
                j += 1
            if rng.random() < name_rate:
                words.append(self.names[int(rng.integers(len(self.names)))])
            else:
                pool = self.topics[topic]
                words.append(pool[int(rng.integers(len(pool)))])
        return words[:n_words]


def pretraining_corpus(lang: Language, n_bytes: int = 1_000_000, seed: int = 1) -> list[str]:
    """Documents of a few sentences each, totalling about ``n_bytes`` characters."""
    rng = np.random.default_rng(seed)
    docs, size = [], 0
    while size < n_bytes:
        topic = int(rng.integers(len(lang.topics)))
        sents = [
            " ".join(lang.sentence(rng, topic, int(rng.integers(8, 16)))) + " ."
            for _ in range(int(rng.integers(3, 8)))
        ]
        doc = " ".join(sents)
        docs.append(doc)
        size += len(doc) + 2
    return docs


def write_corpus(docs: list[str], directory: str | Path, docs_per_file: int = 2000) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(0, len(docs), docs_per_file):
        path = directory / f"part-{i // docs_per_file:04d}.txt"
        path.write_text("\n\n".join(docs[i : i + docs_per_file]) + "\n", encoding="utf-8")
        paths.append(path)
    return paths


def topic_classification(
    lang: Language,
    topics: tuple[int, int] = (0, 1),
    n_train: int = 200,
    n_dev: int = 100,
    n_test: int = 200,
    seed: int = 2,
    labels: tuple[str, str] = ("OTHER", "OFFENSE"),
) -> dict[str, list[tuple[str, str]]]:
    """Binary task: which topic a sentence is about.

    Train sentences only use the first half of each topic's words; dev and
    test sentences only use the second half, so early stopping tracks the
    transfer the test split measures.
    """
    rng = np.random.default_rng(seed)
    half = len(lang.topics[topics[0]]) // 2
    seen = [lang.topics[t][:half] for t in topics]
    unseen = [lang.topics[t][half:] for t in topics]

    def make(n, pools):
        out = []
        for _ in range(n):
            c = int(rng.integers(2))
            sub = Language(lang.function_words, [pools[c]], lang.names)
            words = sub.sentence(rng, 0, int(rng.integers(9, 15)), name_rate=0.0)
            out.append((" ".join(words), labels[c]))
        return out

    return {"train": make(n_train, seen), "dev": make(n_dev, unseen), "test": make(n_test, unseen)}


def multiclass_classification(
    lang: Language, n_classes: int = 4, seed: int = 3, n_train: int = 200, n_dev: int = 100, n_test: int = 200
) -> dict[str, list[tuple[str, str]]]:
    """Same construction over ``n_classes`` topics, labels ``C0..``."""
    rng = np.random.default_rng(seed)
    half = len(lang.topics[0]) // 2

    def make(n, part):
        out = []
        for _ in range(n):
            c = int(rng.integers(n_classes))
            pool = lang.topics[c][:half] if part == "seen" else lang.topics[c][half:]
            sub = Language(lang.function_words, [pool], lang.names)
            out.append((" ".join(sub.sentence(rng, 0, int(rng.integers(9, 15)), name_rate=0.0)), f"C{c}"))
        return out

    return {"train": make(n_train, "seen"), "dev": make(n_dev, "unseen"), "test": make(n_test, "unseen")}


NER_CLASSES = ("PER", "LOC", "ORG")


def ner_task(
    lang: Language, n_train: int = 200, n_dev: int = 60, n_test: int = 100, seed: int = 4
) -> dict[str, list[tuple[list[str], list[str]]]]:
    """Sentences of function words with one- or two-word entities; entity class
    is fixed by the name pool the words come from."""
    if len(lang.names) < 50 * len(NER_CLASSES):
        raise ValueError(f"ner_task needs at least {50 * len(NER_CLASSES)} names, language has {len(lang.names)}")
    rng = np.random.default_rng(seed)
    pools = {c: lang.names[i * 50 : (i + 1) * 50] for i, c in enumerate(NER_CLASSES)}

    def sentence():
        words, tags = [], []
        j = int(rng.integers(len(lang.function_words)))
        for _ in range(int(rng.integers(2, 4))):
            for _ in range(int(rng.integers(1, 3))):
                words.append(lang.function_words[j % len(lang.function_words)])
                tags.append("O")
                j += 1
            cls = NER_CLASSES[int(rng.integers(len(NER_CLASSES)))]
            for k in range(int(rng.integers(1, 3))):
                words.append(pools[cls][int(rng.integers(len(pools[cls])))])
                tags.append(("B-" if k == 0 else "I-") + cls)
        return words, tags

    return {
        "train": [sentence() for _ in range(n_train)],
        "dev": [sentence() for _ in range(n_dev)],
        "test": [sentence() for _ in range(n_test)],
    }


def write_classification(split: dict[str, list[tuple[str, str]]], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, rows in split.items():
        (directory / f"{name}.tsv").write_text("".join(f"{t}\t{l}\n" for t, l in rows), encoding="utf-8")


def write_ner(split: dict[str, list[tuple[list[str], list[str]]]], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, sents in split.items():
        blocks = ["".join(f"{w}\t{t}\n" for w, t in zip(ws, ts)) for ws, ts in sents]
        (directory / f"{name}.conll").write_text("\n".join(blocks), encoding="utf-8")


__all__ = [
    "Language",
    "pretraining_corpus",
    "write_corpus",
    "topic_classification",
    "multiclass_classification",
    "ner_task",
    "write_classification",
    "write_ner",
    "NER_CLASSES",
]

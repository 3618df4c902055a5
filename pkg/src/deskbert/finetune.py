"""Downstream fine-tuning with dev-based early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, DataError
from .metrics import split_tag, macro_f1, span_micro_f1
from .model import (
    Batch,
    ModelConfig,
    Weights,
    compute_gradients,
    encoder_forward,
    encoder_weights,
    head_forward,
    init_head,
)
from .tokenizer import SPECIAL_WORD_ID, Tokenizer, Vocab, add_specials
from .trainer import Checkpoint, OptimizerState, adam_step, clip_by_global_norm, load_checkpoint, lr_at, step_seed

CLASSIFICATION, NER = "classification", "ner"


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    classes: tuple[str, ...]
    max_epochs: int
    max_train_steps: int
    eval_every_steps: int
    lr: float
    batch_size: int
    max_seq_len: int
    metric: str = ""
    patience: int = 5
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.kind not in (CLASSIFICATION, NER):
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        if not self.metric:
            object.__setattr__(self, "metric", "macro_f1" if self.kind == CLASSIFICATION else "span_micro_f1")
        if (self.metric == "macro_f1") != (self.kind == CLASSIFICATION):
            raise ConfigurationError(f"metric {self.metric} does not fit a {self.kind} task")
        if self.eval_every_steps > self.max_train_steps:
            raise ConfigurationError("eval_every_steps must not exceed max_train_steps")
        if min(self.max_epochs, self.max_train_steps, self.eval_every_steps, self.batch_size) < 1:
            raise ConfigurationError("epochs, steps, eval interval and batch size must be >= 1")

    @property
    def early_stopping(self) -> bool:
        return self.kind == CLASSIFICATION

    @property
    def labels(self) -> tuple[str, ...]:
        """Output label inventory: classes, or O plus B-/I- tags for NER."""
        if self.kind == CLASSIFICATION:
            return self.classes
        return ("O",) + tuple(f"{p}-{c}" for c in self.classes for p in ("B", "I"))


# Full-scale task settings; class lists are filled from the data.
GERMEVAL18 = dict(kind=CLASSIFICATION, max_epochs=5, max_train_steps=705, eval_every_steps=50, lr=5e-6, batch_size=32, max_seq_len=150)
GERMEVAL14 = dict(kind=NER, max_epochs=3, max_train_steps=4500, eval_every_steps=1500, lr=5e-5, batch_size=16, max_seq_len=128)


@dataclass(frozen=True)
class RunResult:
    seed: int
    best_dev_metric: float
    test_metric: float
    steps_trained: int
    stopped_early: bool
    dev_history: tuple[tuple[int, float], ...] = ()


# -- data -----------------------------------------------------------------


def read_classification(path: str | Path) -> list[tuple[str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            text, sep, label = line.rpartition("\t")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected text<TAB>label")
            rows.append((text, label))
    return rows


def read_conll(path: str | Path) -> list[tuple[list[str], list[str]]]:
    sents: list[tuple[list[str], list[str]]] = []
    words: list[str] = []
    tags: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                if words:
                    sents.append((words, tags))
                    words, tags = [], []
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: expected token<TAB>tag")
            words.append(parts[0])
            tags.append(parts[-1])
    if words:
        sents.append((words, tags))
    return sents


def load_task_data(kind: str, directory: str | Path) -> dict[str, list]:
    """Read ``train/dev/test`` splits (``.tsv`` for classification, ``.conll`` for NER)."""
    directory = Path(directory)
    ext, reader = (".tsv", read_classification) if kind == CLASSIFICATION else (".conll", read_conll)
    data = {}
    for split in ("train", "dev", "test"):
        path = directory / f"{split}{ext}"
        if not path.exists():
            raise ConfigurationError(f"missing task data file {path}")
        data[split] = reader(path)
    return data


def infer_classes(kind: str, train: Sequence) -> tuple[str, ...]:
    if kind == CLASSIFICATION:
        return tuple(sorted({label for _, label in train}))
    classes = set()
    for _, tags in train:
        for tag in tags:
            prefix, cls = split_tag(tag)
            if cls is not None:
                classes.add(cls)
    return tuple(sorted(classes))


def validate_labels(task: TaskSpec, data: Mapping[str, Sequence]) -> None:
    allowed = set(task.labels)
    for split, rows in data.items():
        for i, row in enumerate(rows, 1):
            labels = [row[1]] if task.kind == CLASSIFICATION else row[1]
            for label in labels:
                if label not in allowed:
                    raise DataError(f"{split} line {i}: label {label!r} outside task classes")
            if task.kind == NER and len(row[0]) != len(row[1]):
                raise DataError(f"{split} sentence {i}: {len(row[0])} tokens but {len(row[1])} tags")


@dataclass
class _Features:
    ids: np.ndarray
    mask: np.ndarray
    word_ids: np.ndarray
    labels: np.ndarray | None  # classification: (N,)
    word_labels: list[list[int]] | None  # ner: per sentence, one per kept word
    n_words: list[int] | None  # ner: words per sentence before truncation


def featurize(task: TaskSpec, rows: Sequence, tokenizer: Tokenizer, max_len: int) -> _Features:
    index = {label: i for i, label in enumerate(task.labels)}
    ids, masks, wids = [], [], []
    if task.kind == CLASSIFICATION:
        labels = []
        for text, label in rows:
            enc = add_specials(tokenizer.encode(text), max_len)
            ids.append(enc.token_ids)
            masks.append(enc.attention_mask)
            wids.append(enc.word_ids)
            labels.append(index[label])
        return _Features(np.asarray(ids), np.asarray(masks), np.asarray(wids), np.asarray(labels), None, None)
    word_labels, n_words = [], []
    for words, tags in rows:
        enc = add_specials(tokenizer.encode_words(words), max_len)
        kept = len({w for w in enc.word_ids if w != SPECIAL_WORD_ID})
        ids.append(enc.token_ids)
        masks.append(enc.attention_mask)
        wids.append(enc.word_ids)
        word_labels.append([index[t] for t in tags[:kept]])
        n_words.append(len(words))
    return _Features(np.asarray(ids), np.asarray(masks), np.asarray(wids), None, word_labels, n_words)


def _batch(f: _Features, idx: np.ndarray) -> Batch:
    b = Batch(input_ids=f.ids[idx], attention_mask=f.mask[idx], word_ids=f.word_ids[idx])
    if f.labels is not None:
        b.labels = f.labels[idx]
    else:
        b.word_labels = np.asarray([lab for i in idx for lab in f.word_labels[i]], dtype=np.int64)
    return b


# -- training -----------------------------------------------------------------


def head_kind(task: TaskSpec, objective: str) -> str:
    if task.kind == NER:
        return "token_tag"
    return "electra_pool_classify" if objective == "electra" else "cls_classify"


class FineTuner:
    """One fine-tuning run of one checkpoint on one task with one seed."""

    def __init__(self, checkpoint: Checkpoint | str | Path, task: TaskSpec, vocab: Vocab):
        if isinstance(checkpoint, (str, Path)):
            checkpoint = load_checkpoint(checkpoint)
        if task.max_seq_len > checkpoint.config.max_seq_len:
            raise ConfigurationError(
                f"task max_seq_len {task.max_seq_len} exceeds checkpoint max_seq_len {checkpoint.config.max_seq_len}"
            )
        if len(vocab) != checkpoint.config.vocab_size:
            raise ConfigurationError(f"vocab has {len(vocab)} tokens, checkpoint expects {checkpoint.config.vocab_size}")
        self.config: ModelConfig = checkpoint.config
        self.objective = checkpoint.objective
        self.encoder = encoder_weights(checkpoint.state.weights)
        self.task = task
        self.kind = head_kind(task, self.objective)
        self.tokenizer = Tokenizer(vocab)

    def predict(self, weights: Weights, f: _Features) -> list:
        bs = self.task.eval_batch_size
        out: list = []
        with torch.no_grad():
            for start in range(0, len(f.ids), bs):
                idx = np.arange(start, min(start + bs, len(f.ids)))
                trace = encoder_forward(weights, self.config, f.ids[idx], f.mask[idx], word_ids=f.word_ids[idx])
                pred = head_forward(trace, self.kind, weights).argmax(-1).numpy()
                if self.task.kind == CLASSIFICATION:
                    out.extend(int(p) for p in pred)
                else:
                    pos = 0
                    for i in idx:
                        k = len(f.word_labels[i])
                        tags = [int(p) for p in pred[pos : pos + k]]
                        # words cut off by max_seq_len are predicted O
                        out.append(tags + [0] * (f.n_words[i] - k))
                        pos += k
        return out

    def score(self, weights: Weights, f: _Features, rows: Sequence) -> float:
        pred = self.predict(weights, f)
        labels = self.task.labels
        if self.task.kind == CLASSIFICATION:
            return macro_f1([labels[p] for p in pred], [r[1] for r in rows], labels)
        return span_micro_f1([[labels[p] for p in s] for s in pred], [r[1] for r in rows])

    def run(self, data: Mapping[str, Sequence], seed: int) -> RunResult:
        task = self.task
        for split in ("train", "dev", "test"):
            if not data.get(split):
                raise ConfigurationError(f"task data has no {split} examples")
        validate_labels(task, data)
        feats = {s: featurize(task, data[s], self.tokenizer, task.max_seq_len) for s in ("train", "dev", "test")}

        weights = dict(self.encoder)
        weights.update(init_head(self.kind, self.config, len(task.labels), seed))
        opt = OptimizerState.zeros_like(weights, weight_decay=0.0)
        n_train = len(data["train"])
        steps_per_epoch = math.ceil(n_train / task.batch_size)
        total = min(task.max_train_steps, task.max_epochs * steps_per_epoch)
        rng = np.random.default_rng(seed)

        best_metric, best_weights, bad_evals = -1.0, weights, 0
        history: list[tuple[int, float]] = []
        stopped = False
        step = 0
        order = np.empty(0, dtype=np.int64)
        while step < total:
            if step % steps_per_epoch == 0:
                order = rng.permutation(n_train)
            pos = (step % steps_per_epoch) * task.batch_size
            idx = order[pos : pos + task.batch_size]
            _, grads = compute_gradients(
                weights, self.config, _batch(feats["train"], idx), self.kind, train_mode=True, seed=step_seed(seed, step)
            )
            grads, _ = clip_by_global_norm(grads, 1.0)
            opt, weights = adam_step(opt, weights, grads, lr_at(step, task.lr, 0, total))
            step += 1
            if step % task.eval_every_steps == 0 or step == total:
                metric = self.score(weights, feats["dev"], data["dev"])
                history.append((step, metric))
                if metric > best_metric:
                    best_metric, best_weights, bad_evals = metric, weights, 0
                else:
                    bad_evals += 1
                    if task.early_stopping and bad_evals >= task.patience:
                        stopped = step < total
                        break
        test = self.score(best_weights, feats["test"], data["test"])
        return RunResult(seed, best_metric, test, step, stopped, tuple(history))


def finetune_run(
    checkpoint: Checkpoint | str | Path,
    task: TaskSpec,
    data: Mapping[str, Sequence],
    seed: int,
    vocab: Vocab,
) -> RunResult:
    return FineTuner(checkpoint, task, vocab).run(data, seed)


def early_stop_index(dev_metrics: Sequence[float], patience: int = 5) -> tuple[int, int]:
    """(number of evaluations run, index of the best one) under the patience rule."""
    best, best_i, bad = -math.inf, -1, 0
    for i, m in enumerate(dev_metrics):
        if m > best:
            best, best_i, bad = m, i, 0
        else:
            bad += 1
            if bad >= patience:
                return i + 1, best_i
    return len(dev_metrics), best_i


def format_run_row(task_name: str, result: RunResult) -> str:
    return "\t".join(
        [
            task_name,
            str(result.seed),
            f"{100 * result.best_dev_metric:.2f}",
            f"{100 * result.test_metric:.2f}",
            str(result.steps_trained),
            str(result.stopped_early).lower(),
        ]
    )


def make_task(kind: str, data: Mapping[str, Sequence], classes: Sequence[str] | None = None, **overrides) -> TaskSpec:
    """TaskSpec from the full-scale preset for ``kind`` plus overrides; classes default to the train labels."""
    base = dict(GERMEVAL18 if kind == CLASSIFICATION else GERMEVAL14)
    base.update(overrides)
    base["kind"] = kind
    cls = tuple(classes) if classes else infer_classes(kind, data["train"])
    return TaskSpec(classes=cls, **base)


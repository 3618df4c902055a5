"""Evaluation-driven checkpoint selection.

Each checkpoint is fine-tuned on every downstream task (several seeds for
classification, one run for NER). A checkpoint's score is the mean over tasks
of the best run per task; the selected checkpoint maximizes that score, ties
going to the earliest step.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import AggregationError, ConfigurationError, DataError, SelectionError
from .finetune import CLASSIFICATION, TaskSpec, finetune_run
from .tokenizer import Vocab
from .trainer import Checkpoint, load_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class EvalRecord:
    checkpoint_step: int
    task: str
    seed: int
    f1: float

    def __post_init__(self):
        if not 0.0 <= self.f1 <= 1.0:
            raise DataError(f"F1 {self.f1} outside [0, 1]")


@dataclass(frozen=True)
class DownstreamTask:
    name: str
    spec: TaskSpec
    data: Mapping[str, Sequence]


@dataclass
class SelectionReport:
    per_task: dict[int, dict[str, float]]
    averaged: dict[int, float]
    selected_step: int
    records: list[EvalRecord] = field(default_factory=list)


def planned_runs(tasks: Sequence[DownstreamTask], seeds: Sequence[int]) -> list[tuple[DownstreamTask, int]]:
    """Every classification task once per seed; every NER task once, with the first seed."""
    if not seeds:
        raise ConfigurationError("at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ConfigurationError(f"duplicate seeds in {list(seeds)}")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate task names in {names}")
    for t in tasks:
        for split in ("train", "dev", "test"):
            if not t.data.get(split):
                raise ConfigurationError(f"task {t.name!r} has no {split} data")
    runs = []
    for t in tasks:
        run_seeds = seeds if t.spec.kind == CLASSIFICATION else seeds[:1]
        runs.extend((t, s) for s in run_seeds)
    return runs


def _one_run(args) -> EvalRecord:
    ckpt, task, seed, vocab = args
    result = finetune_run(ckpt, task.spec, task.data, seed, vocab)
    log.info("step %d task %s seed %d: test %.4f", ckpt.state.step, task.name, seed, result.test_metric)
    return EvalRecord(ckpt.state.step, task.name, seed, result.test_metric)


def evaluate_checkpoint(
    checkpoint: Checkpoint | str | Path,
    tasks: Sequence[DownstreamTask],
    seeds: Sequence[int],
    vocab: Vocab,
    jobs: int = 1,
) -> list[EvalRecord]:
    runs = planned_runs(tasks, seeds)
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    work = [(checkpoint, t, s, vocab) for t, s in runs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_one_run, work))
    else:
        records = [_one_run(w) for w in work]
    return sorted(records)


def aggregate_score(records: Iterable[EvalRecord], tasks: Sequence[str]) -> float:
    """Mean over tasks of the best record per task."""
    best: dict[str, float] = {}
    for r in records:
        best[r.task] = max(best.get(r.task, -1.0), r.f1)
    missing = [t for t in tasks if t not in best]
    if missing or not tasks:
        raise AggregationError(f"no records for task(s) {missing}")
    return sum(best[t] for t in tasks) / len(tasks)


def select_best(averaged: Mapping[int, float] | Iterable[tuple[int, float]]) -> int:
    """Step with the highest averaged score; ties go to the smallest step."""
    items = list(averaged.items()) if isinstance(averaged, Mapping) else list(averaged)
    if not items:
        raise SelectionError("no checkpoints scored")
    return min(items, key=lambda kv: (-kv[1], kv[0]))[0]


def build_report(records: Iterable[EvalRecord], tasks: Sequence[str] | None = None) -> SelectionReport:
    records = sorted(records)
    if tasks is None:
        tasks = sorted({r.task for r in records})
    by_step: dict[int, list[EvalRecord]] = {}
    for r in records:
        by_step.setdefault(r.checkpoint_step, []).append(r)
    per_task: dict[int, dict[str, float]] = {}
    averaged: dict[int, float] = {}
    for step in sorted(by_step):
        recs = by_step[step]
        per_task[step] = {t: max(r.f1 for r in recs if r.task == t) for t in tasks if any(r.task == t for r in recs)}
        averaged[step] = aggregate_score(recs, tasks)
    return SelectionReport(per_task, averaged, select_best(averaged), records)


# -- report file --------------------------------------------------------------


def pct(x: float) -> str:
    return f"{100 * x:.2f}"


def format_report(report: SelectionReport) -> str:
    lines = ["step\ttask\tseed\tf1"]
    lines += [f"{r.checkpoint_step}\t{r.task}\t{r.seed}\t{pct(r.f1)}" for r in report.records]
    lines += ["", "step\tavg_f1"]
    lines += [f"{s}\t{pct(a)}" for s, a in sorted(report.averaged.items())]
    lines += ["", f"selected\t{report.selected_step}"]
    return "\n".join(lines) + "\n"


def write_report(report: SelectionReport, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(format_report(report), encoding="utf-8")
    return path


def read_records(path: str | Path) -> list[EvalRecord]:
    """Parse the record block of a report (scores are stored as percentages)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != ["step", "task", "seed", "f1"]:
        raise DataError(f"{path}: missing record header 'step<TAB>task<TAB>seed<TAB>f1'")
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            break
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 columns")
        try:
            records.append(EvalRecord(int(parts[0]), parts[1], int(parts[2]), float(parts[3]) / 100))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return records

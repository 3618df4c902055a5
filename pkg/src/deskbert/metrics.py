"""Macro F1 for classification and span-level micro F1 for BIO tagging.

Both are computed with exact rational arithmetic and converted to float at
the end, so independent implementations can be compared for equality.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Hashable, Sequence

from .errors import DataError, MetricError


def _f1(tp: int, fp: int, fn: int) -> Fraction:
    denom = 2 * tp + fp + fn
    return Fraction(2 * tp, denom) if denom else Fraction(0)


def macro_f1(predictions: Sequence[Hashable], gold: Sequence[Hashable], classes: Sequence[Hashable]) -> float:
    """Unweighted mean of per-class F1 over all task classes.

    A class never predicted and never gold contributes 0.
    """
    if len(predictions) != len(gold):
        raise MetricError(f"{len(predictions)} predictions for {len(gold)} gold labels")
    if not gold:
        raise MetricError("macro_f1 of empty input")
    if not classes:
        raise MetricError("no classes given")
    known = set(classes)
    tp = dict.fromkeys(classes, 0)
    fp = dict.fromkeys(classes, 0)
    fn = dict.fromkeys(classes, 0)
    for p, g in zip(predictions, gold):
        if p not in known or g not in known:
            raise MetricError(f"label outside task classes: {p if p not in known else g!r}")
        if p == g:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    total = sum((_f1(tp[c], fp[c], fn[c]) for c in classes), Fraction(0))
    return float(total / len(classes))


def split_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    prefix, sep, cls = tag.partition("-")
    if not sep or prefix not in ("B", "I") or not cls:
        raise DataError(f"malformed BIO tag {tag!r}")
    return prefix, cls


def decode_bio_spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """Maximal spans as (class, start, end); a stray I- opens a new span."""
    spans: set[tuple[str, int, int]] = set()
    cls_open: str | None = None
    start = 0
    for i, tag in enumerate(tags):
        prefix, cls = split_tag(tag)
        if prefix == "I" and cls == cls_open:
            continue
        if cls_open is not None:
            spans.add((cls_open, start, i))
        cls_open, start = (cls, i) if prefix != "O" else (None, i)
    if cls_open is not None:
        spans.add((cls_open, start, len(tags)))
    return spans


def span_counts(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> tuple[int, int, int]:
    """(true positives, predicted spans, gold spans) pooled over sentences."""
    if len(pred) != len(gold):
        raise DataError(f"{len(pred)} predicted sentences for {len(gold)} gold sentences")
    tp = n_pred = n_gold = 0
    for i, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            raise DataError(f"sentence {i}: {len(p)} predicted tags for {len(g)} gold tags")
        ps, gs = decode_bio_spans(p), decode_bio_spans(g)
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    return tp, n_pred, n_gold


def span_micro_f1(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> float:
    """Exact-match span F1 pooled across sentences; 0 when nothing matches."""
    tp, n_pred, n_gold = span_counts(pred, gold)
    if tp == 0:
        return 0.0
    return float(Fraction(2 * tp, n_pred + n_gold))

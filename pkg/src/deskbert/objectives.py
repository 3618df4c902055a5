"""MLM (token or whole-word masking) and ELECTRA replaced-token detection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import InputError, NumericError
from .model import (
    GENERATOR_PREFIX,
    IGNORE_INDEX,
    Batch,
    ModelConfig,
    cross_entropy,
    encoder_forward,
    generator_config,
    mlm_head,
    rtd_head,
)
from .tokenizer import MASK_ID, NUM_SPECIALS, SPECIAL_WORD_ID, Encoding, word_spans

MASK, RANDOM, KEEP = "MASK", "RANDOM", "KEEP"
ORIGINAL, REPLACED = 0, 1
IGNORE = IGNORE_INDEX

MODES = ("token", "whole_word")


@dataclass(frozen=True)
class MaskingPlan:
    positions: tuple[int, ...]
    actions: tuple[str, ...]
    originals: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class RTDBatch:
    masked_ids: np.ndarray
    corrupted_ids: np.ndarray
    disc_labels: np.ndarray
    gen_targets: np.ndarray


def candidate_positions(enc: Encoding) -> list[int]:
    return [
        i
        for i, (w, m) in enumerate(zip(enc.word_ids, enc.attention_mask))
        if m and w != SPECIAL_WORD_ID
    ]


def masking_budget(n_candidates: int, rate: float) -> int:
    if n_candidates == 0:
        return 0
    return max(1, math.floor(rate * n_candidates + 0.5))


def plan_masking(enc: Encoding, mode: str, rate: float, rng: np.random.Generator) -> MaskingPlan:
    """Pick positions to corrupt and an 80/10/10 MASK/RANDOM/KEEP action for each.

    In whole-word mode words are taken in shuffled order until the covered
    token count first reaches the token budget, so a plan is always a union of
    complete words.
    """
    if not 0.0 < rate < 1.0:
        raise InputError(f"masking rate must be in (0, 1), got {rate}")
    if mode not in MODES:
        raise InputError(f"unknown masking mode {mode!r}")
    cands = candidate_positions(enc)
    k = masking_budget(len(cands), rate)
    if k == 0:
        return MaskingPlan((), (), ())
    if mode == "token":
        chosen = [cands[i] for i in rng.permutation(len(cands))[:k]]
    else:
        allowed = set(cands)
        spans = [s for s in word_spans(enc) if s[0] in allowed]
        chosen = []
        for i in rng.permutation(len(spans)):
            start, end = spans[i]
            chosen.extend(range(start, end))
            if len(chosen) >= k:
                break
    positions = tuple(sorted(chosen))
    u = rng.random(len(positions))
    actions = tuple(MASK if x < 0.8 else RANDOM if x < 0.9 else KEEP for x in u)
    originals = tuple(enc.token_ids[p] for p in positions)
    return MaskingPlan(positions, actions, originals)


def apply_masking(
    enc: Encoding, plan: MaskingPlan, rng: np.random.Generator, vocab_size: int
) -> tuple[Encoding, tuple[int, ...]]:
    """Corrupt planned positions; labels carry originals there and IGNORE elsewhere."""
    ids = list(enc.token_ids)
    labels = [IGNORE] * len(ids)
    for pos, action, orig in zip(plan.positions, plan.actions, plan.originals):
        if pos >= len(ids) or ids[pos] != orig:
            raise InputError(f"masking plan does not match encoding at position {pos}")
        labels[pos] = orig
        if action == MASK:
            ids[pos] = MASK_ID
        elif action == RANDOM:
            ids[pos] = int(rng.integers(NUM_SPECIALS, vocab_size))
    return Encoding(tuple(ids), enc.word_ids, enc.attention_mask), tuple(labels)


def mask_batch(
    encodings: Sequence[Encoding], mode: str, rate: float, rng: np.random.Generator, vocab_size: int
) -> Batch:
    """Plan and apply masking per sequence; returns an MLM batch."""
    ids, labels = [], []
    for enc in encodings:
        corrupted, lab = apply_masking(enc, plan_masking(enc, mode, rate, rng), rng, vocab_size)
        ids.append(corrupted.token_ids)
        labels.append(lab)
    return Batch(
        input_ids=np.asarray(ids, dtype=np.int64),
        attention_mask=np.asarray([e.attention_mask for e in encodings], dtype=np.int64),
        word_ids=np.asarray([e.word_ids for e in encodings], dtype=np.int64),
        mlm_labels=np.asarray(labels, dtype=np.int64),
    )


# -- losses -------------------------------------------------------------------


def mlm_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy over labeled positions."""
    return cross_entropy(logits, labels)


def mlm_loss_from_hidden(
    hidden: torch.Tensor,
    weights: Mapping[str, torch.Tensor],
    labels,
    prefix: str = "",
) -> torch.Tensor:
    # the vocab projection only runs at labeled positions
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    sel = lab != IGNORE
    if not bool(sel.any()):
        raise NumericError("no labeled positions in batch", tensor="labels")
    logits = mlm_head(hidden[sel], weights, prefix=prefix)
    return mlm_loss(logits, lab[sel])


def bce_with_logits(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean binary cross-entropy over positions whose label is not IGNORE."""
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    keep = lab != IGNORE
    if not bool(keep.any()):
        raise NumericError("no discriminator positions in batch", tensor="disc_labels")
    z = logits[keep]
    y = lab[keep].to(z.dtype)
    return (torch.nn.functional.softplus(z) - y * z).mean()


def electra_loss(gen_logits, gen_targets, disc_logits, disc_labels, lam: float = 50.0) -> torch.Tensor:
    return mlm_loss(gen_logits, gen_targets) + lam * bce_with_logits(disc_logits, disc_labels)


# -- replaced-token detection -------------------------------------------------


def sample_tokens(logits: torch.Tensor, rng: np.random.Generator) -> np.ndarray:
    """One draw per row from softmax(logits) at temperature 1, by inverse CDF."""
    probs = torch.softmax(logits.detach(), dim=-1).numpy()
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    idx = (cdf < u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1).astype(np.int64)


def _corrupt(masked_ids: np.ndarray, attention_mask: np.ndarray, gen_targets: np.ndarray, samples: np.ndarray):
    planned = gen_targets != IGNORE
    corrupted = masked_ids.copy()
    corrupted[planned] = samples
    disc_labels = np.where(np.asarray(attention_mask) == 1, ORIGINAL, IGNORE).astype(np.int64)
    disc_labels[planned] = np.where(samples == gen_targets[planned], ORIGINAL, REPLACED)
    return corrupted, disc_labels


def electra_forward(
    weights: Mapping[str, torch.Tensor],
    config: ModelConfig,
    batch: Batch,
    *,
    lam: float = 50.0,
    train_mode: bool = False,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> dict:
    """Joint generator/discriminator loss.

    ``batch.input_ids`` is the masked input, ``batch.mlm_labels`` the originals
    at planned positions. If ``batch.corrupted_ids`` is absent, replacements are
    sampled from the generator with ``rng``; sampling is not differentiated.
    """
    gen_cfg = generator_config(config)
    masked = np.asarray(batch.input_ids)
    targets = np.asarray(batch.mlm_labels)
    g_trace = encoder_forward(
        weights, gen_cfg, masked, batch.attention_mask, train_mode, seed, prefix=GENERATOR_PREFIX
    )
    sel = torch.from_numpy(targets != IGNORE)
    if not bool(sel.any()):
        raise NumericError("no labeled positions in batch", tensor="labels")
    gen_logits = mlm_head(g_trace.hidden[sel], weights, prefix=GENERATOR_PREFIX)
    gen_targets = torch.from_numpy(targets)[sel]

    if batch.corrupted_ids is None:
        if rng is None:
            raise InputError("electra loss needs corrupted_ids or an rng to sample them")
        corrupted, disc_labels = _corrupt(masked, batch.attention_mask, targets, sample_tokens(gen_logits, rng))
    else:
        corrupted, disc_labels = np.asarray(batch.corrupted_ids), np.asarray(batch.disc_labels)

    d_trace = encoder_forward(weights, config, corrupted, batch.attention_mask, train_mode, seed + 1)
    disc_logits = rtd_head(d_trace.hidden, weights)
    gen_loss = mlm_loss(gen_logits, gen_targets)
    disc_loss = bce_with_logits(disc_logits, disc_labels)
    return {
        "loss": gen_loss + lam * disc_loss,
        "gen_loss": gen_loss,
        "disc_loss": disc_loss,
        "corrupted_ids": corrupted,
        "disc_labels": disc_labels,
        "disc_logits": disc_logits,
        "disc_hidden": d_trace.hidden,
    }


def rtd_corrupt(
    enc: Encoding,
    weights: Mapping[str, torch.Tensor],
    config: ModelConfig,
    plan: MaskingPlan,
    rng: np.random.Generator,
) -> RTDBatch:
    """Run the generator on the MLM-masked input and sample substitutes at planned positions.

    ``config`` is the discriminator config; generator tensors live under
    ``generator.`` in ``weights``.
    """
    masked, labels = apply_masking(enc, plan, rng, config.vocab_size)
    masked_ids = np.asarray([masked.token_ids], dtype=np.int64)
    targets = np.asarray([labels], dtype=np.int64)
    mask = np.asarray([enc.attention_mask], dtype=np.int64)
    if not len(plan):
        disc = np.where(mask == 1, ORIGINAL, IGNORE).astype(np.int64)
        return RTDBatch(masked_ids[0], masked_ids[0].copy(), disc[0], targets[0])
    with torch.no_grad():
        trace = encoder_forward(weights, generator_config(config), masked_ids, mask, prefix=GENERATOR_PREFIX)
        sel = torch.from_numpy(targets != IGNORE)
        logits = mlm_head(trace.hidden[sel], weights, prefix=GENERATOR_PREFIX)
    corrupted, disc = _corrupt(masked_ids, mask, targets, sample_tokens(logits, rng))
    return RTDBatch(masked_ids[0], corrupted[0], disc[0], targets[0])

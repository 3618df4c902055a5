"""Finite-difference gradient check over every loss the library trains with."""

from __future__ import annotations

import numpy as np
import torch

from deskbert.model import Batch, ModelConfig, compute_gradients, init_head, init_weights, loss_value
from deskbert.objectives import mask_batch
from deskbert.tokenizer import Encoding, add_specials

from oracles import central_differences, relative_error

TOLERANCE = 1e-4
# tensors whose exact gradient is zero (attention key biases: softmax is shift
# invariant) are judged against this norm instead of their own
NORM_FLOOR = 1e-4
H = 1e-5

CONFIG = ModelConfig(layers=2, hidden=16, heads=2, vocab_size=11, max_seq_len=7, ffn_dim=24, dropout=0.1)


def _encodings():
    # word layout with a two-piece word so token_tag pools over first subwords
    a = Encoding((5, 6, 7, 8), (0, 0, 1, 2), (1, 1, 1, 1))
    b = Encoding((9, 10), (0, 1), (1, 1))
    return [add_specials(a, 7), add_specials(b, 7)]


def _spread(weights, seed):
    """Move away from the near-uniform-attention init so every gradient is well above FD noise."""
    g = torch.Generator().manual_seed(seed)
    out = {}
    for name, w in weights.items():
        scale = 0.1 if name.endswith((".bias", ".shift", ".gain")) else 0.4
        out[name] = w + scale * torch.randn(w.shape, generator=g, dtype=w.dtype)
    return out


def _setup(kind: str):
    rng = np.random.default_rng(0)
    encs = _encodings()
    ids = np.asarray([e.token_ids for e in encs])
    mask = np.asarray([e.attention_mask for e in encs])
    wids = np.asarray([e.word_ids for e in encs])
    if kind in ("mlm", "electra"):
        weights = init_weights(CONFIG, seed=1, objective=kind)
        batch = mask_batch(encs, "token", 0.3, rng, CONFIG.vocab_size)
        if kind == "electra":
            # fix the generator samples so the loss is a smooth function of the weights
            batch.corrupted_ids = batch.input_ids.copy()
            batch.corrupted_ids[0, 2] = 10
            batch.disc_labels = np.where(mask == 1, 0, -100)
            batch.disc_labels[0, 2] = 1
        return _spread(weights, 4), batch
    weights = init_weights(CONFIG, seed=1, objective=None)
    n = 3
    weights.update(init_head(kind, CONFIG, n, seed=2))
    batch = Batch(input_ids=ids, attention_mask=mask, word_ids=wids)
    if kind == "token_tag":
        batch.word_labels = np.asarray([0, 2, 1, 1, 0])
    else:
        batch.labels = np.asarray([2, 0])
    return _spread(weights, 4), batch


KINDS = ("mlm", "electra", "cls_classify", "electra_pool_classify", "token_tag")


def check(kind: str, train_mode: bool = True) -> dict[str, float]:
    """Per-tensor relative error between autograd and central differences."""
    weights, batch = _setup(kind)
    kw = dict(train_mode=train_mode, seed=3, lam=50.0)
    _, grads = compute_gradients(weights, CONFIG, batch, kind, **kw)
    fd = central_differences(lambda w: loss_value(w, CONFIG, batch, kind, **kw), weights, h=H)
    return {name: relative_error(grads[name], fd[name], NORM_FLOOR) for name in weights}

"""Transformer encoder over a flat ``name -> tensor`` weight map.

The forward pass is written functionally so that the same weight map can be
read by several networks: an ELECTRA generator reads the discriminator's
token/position embeddings and stores its own tensors under ``generator.``.
Training arithmetic is float64; reverse-mode gradients come from torch
autograd.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
import torch

from .errors import ConfigurationError, InputError, NumericError
from .tokenizer import SPECIAL_WORD_ID

DTYPE = torch.float64
LN_EPS = 1e-12
INIT_STD = 0.02
IGNORE_INDEX = -100

Weights = dict[str, torch.Tensor]

HEAD_KINDS = ("mlm", "cls_classify", "electra_pool_classify", "rtd_discriminate", "token_tag")
GENERATOR_PREFIX = "generator."


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    heads: int
    vocab_size: int
    max_seq_len: int
    ffn_dim: int = 0
    dropout: float = 0.1
    embedding_size: int = 0

    def __post_init__(self):
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden)
        if self.embedding_size == 0:
            object.__setattr__(self, "embedding_size", self.hidden)
        for name in ("layers", "hidden", "heads", "vocab_size", "max_seq_len", "ffn_dim", "embedding_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ConfigurationError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def base(cls, vocab_size: int = 31_000, max_seq_len: int = 512) -> "ModelConfig":
        return cls(layers=12, hidden=768, heads=12, vocab_size=vocab_size, max_seq_len=max_seq_len)

    @classmethod
    def large(cls, vocab_size: int = 31_000, max_seq_len: int = 512) -> "ModelConfig":
        return cls(layers=24, hidden=1024, heads=16, vocab_size=vocab_size, max_seq_len=max_seq_len)

    def to_dict(self) -> dict:
        return asdict(self)


def generator_config(config: ModelConfig, fraction: float = 1 / 3) -> ModelConfig:
    """ELECTRA generator: same depth, a third of the width, tied embeddings."""
    hidden = max(1, int(config.hidden * fraction))
    heads = max(h for h in range(1, config.heads + 1) if hidden % h == 0)
    return replace(
        config, hidden=hidden, heads=heads, ffn_dim=4 * hidden, embedding_size=config.embedding_size
    )


# -- initialization -----------------------------------------------------------


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * INIT_STD


def encoder_shapes(config: ModelConfig, prefix: str = "", embeddings: bool = True) -> dict[str, tuple[int, ...]]:
    H, E, F = config.hidden, config.embedding_size, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {}
    if embeddings:
        shapes[f"{prefix}embeddings.token.weight"] = (config.vocab_size, E)
        shapes[f"{prefix}embeddings.position.weight"] = (config.max_seq_len, E)
        shapes[f"{prefix}embeddings.ln.gain"] = (E,)
        shapes[f"{prefix}embeddings.ln.shift"] = (E,)
    if E != H:
        shapes[f"{prefix}embeddings.project.weight"] = (E, H)
        shapes[f"{prefix}embeddings.project.bias"] = (H,)
    for i in range(config.layers):
        p = f"{prefix}layer.{i}."
        for proj in ("q", "k", "v", "out"):
            shapes[p + f"attention.{proj}.weight"] = (H, H)
            shapes[p + f"attention.{proj}.bias"] = (H,)
        shapes[p + "attention_ln.gain"] = (H,)
        shapes[p + "attention_ln.shift"] = (H,)
        shapes[p + "ffn.in.weight"] = (H, F)
        shapes[p + "ffn.in.bias"] = (F,)
        shapes[p + "ffn.out.weight"] = (F, H)
        shapes[p + "ffn.out.bias"] = (H,)
        shapes[p + "ffn_ln.gain"] = (H,)
        shapes[p + "ffn_ln.shift"] = (H,)
    return shapes


def head_shapes(kind: str, config: ModelConfig, num_classes: int = 0, prefix: str = "") -> dict[str, tuple[int, ...]]:
    H, E, V = config.hidden, config.embedding_size, config.vocab_size
    p = f"{prefix}head."
    if kind == "mlm":
        return {
            p + "mlm.dense.weight": (H, E),
            p + "mlm.dense.bias": (E,),
            p + "mlm.ln.gain": (E,),
            p + "mlm.ln.shift": (E,),
            p + "mlm.output.bias": (V,),
        }
    if kind == "rtd_discriminate":
        return {
            p + "rtd.dense.weight": (H, H),
            p + "rtd.dense.bias": (H,),
            p + "rtd.output.weight": (H, 1),
            p + "rtd.output.bias": (1,),
        }
    if num_classes < 1 and kind in HEAD_KINDS:
        raise ConfigurationError(f"head {kind} needs num_classes >= 1")
    if kind == "cls_classify":
        return {p + "cls.output.weight": (H, num_classes), p + "cls.output.bias": (num_classes,)}
    if kind == "electra_pool_classify":
        return {
            p + "pool.dense.weight": (H, H),
            p + "pool.dense.bias": (H,),
            p + "pool.output.weight": (H, num_classes),
            p + "pool.output.bias": (num_classes,),
        }
    if kind == "token_tag":
        return {p + "tag.output.weight": (H, num_classes), p + "tag.output.bias": (num_classes,)}
    raise ConfigurationError(f"unknown head kind {kind!r}")


def _materialize(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator) -> Weights:
    out: Weights = {}
    for name, shape in shapes.items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith((".bias", ".shift")):
            arr = np.zeros(shape)
        else:
            arr = _truncated_normal(rng, shape)
        out[name] = torch.from_numpy(arr).to(DTYPE)
    return out


def weight_shapes(config: ModelConfig, objective: str | None = "mlm") -> dict[str, tuple[int, ...]]:
    """Names and shapes of a pretraining weight map; ``objective`` is mlm, electra or None."""
    shapes = encoder_shapes(config)
    if objective == "mlm":
        shapes.update(head_shapes("mlm", config))
    elif objective == "electra":
        shapes.update(head_shapes("rtd_discriminate", config))
        gen = generator_config(config)
        shapes.update(encoder_shapes(gen, GENERATOR_PREFIX, embeddings=False))
        shapes.update(head_shapes("mlm", gen, prefix=GENERATOR_PREFIX))
    elif objective is not None:
        raise ConfigurationError(f"unknown objective {objective!r}")
    return shapes


def init_weights(config: ModelConfig, seed: int, objective: str | None = "mlm") -> Weights:
    """Truncated-normal matrices (sigma 0.02, cut at 2 sigma), zero biases, unit gains."""
    if not isinstance(config, ModelConfig):
        raise ConfigurationError("init_weights needs a ModelConfig")
    return _materialize(weight_shapes(config, objective), np.random.default_rng(seed))


def init_head(kind: str, config: ModelConfig, num_classes: int, seed: int) -> Weights:
    return _materialize(head_shapes(kind, config, num_classes), np.random.default_rng(seed))


def encoder_weights(weights: Mapping[str, torch.Tensor]) -> Weights:
    """Strip pretraining heads and generator tensors, keeping the shared encoder."""
    return {
        k: v
        for k, v in weights.items()
        if not k.startswith(GENERATOR_PREFIX) and not k.startswith("head.")
    }


# -- forward ------------------------------------------------------------------


@dataclass
class ForwardTrace:
    hidden: torch.Tensor  # (batch, seq, hidden)
    attention_mask: torch.Tensor  # (batch, seq) float 0/1
    layers: list[torch.Tensor] = field(default_factory=list)
    word_ids: np.ndarray | None = None


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def normalize(x: torch.Tensor) -> torch.Tensor:
    """Zero-mean unit-variance over the last axis (layer norm before gain/shift)."""
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + LN_EPS)


def layer_norm(x: torch.Tensor, w: Mapping[str, torch.Tensor], name: str) -> torch.Tensor:
    return normalize(x) * w[name + ".gain"] + w[name + ".shift"]


def _affine(x: torch.Tensor, w: Mapping[str, torch.Tensor], name: str) -> torch.Tensor:
    return x @ w[name + ".weight"] + w[name + ".bias"]


class _Dropout:
    """Inverted dropout driven by an explicit seed; identity outside train mode."""

    def __init__(self, p: float, train_mode: bool, seed: int):
        self.p = p
        self.active = train_mode and p > 0
        self.gen = torch.Generator().manual_seed(seed) if self.active else None

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if not self.active:
            return x
        keep = torch.rand(x.shape, generator=self.gen, dtype=DTYPE) >= self.p
        return x * keep / (1.0 - self.p)


def _as_long(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.long()
    return torch.as_tensor(np.asarray(x), dtype=torch.long)


def encoder_forward(
    weights: Mapping[str, torch.Tensor],
    config: ModelConfig,
    input_ids,
    attention_mask=None,
    train_mode: bool = False,
    seed: int = 0,
    prefix: str = "",
    embedding_prefix: str = "",
    word_ids=None,
) -> ForwardTrace:
    """Post-LN encoder: embeddings, then ``layers`` blocks of attention and GELU FFN."""
    ids = _as_long(input_ids)
    if ids.dim() != 2:
        raise InputError(f"input_ids must be (batch, seq), got shape {tuple(ids.shape)}")
    B, T = ids.shape
    if T > config.max_seq_len:
        raise InputError(f"sequence length {T} exceeds max_seq_len {config.max_seq_len}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= config.vocab_size):
        raise InputError(f"token id out of range [0, {config.vocab_size})")
    if attention_mask is None:
        mask = torch.ones(B, T, dtype=DTYPE)
    else:
        mask = torch.as_tensor(np.asarray(attention_mask) if not isinstance(attention_mask, torch.Tensor) else attention_mask).to(DTYPE)

    w = weights
    drop = _Dropout(config.dropout, train_mode, seed)
    ep = embedding_prefix
    x = w[ep + "embeddings.token.weight"][ids] + w[ep + "embeddings.position.weight"][:T]
    x = drop(layer_norm(x, w, ep + "embeddings.ln"))
    if config.embedding_size != config.hidden:
        x = _affine(x, w, prefix + "embeddings.project")

    nh = config.heads
    dh = config.hidden // nh
    key_pad = (mask == 0)[:, None, None, :]
    layers = []
    for i in range(config.layers):
        p = f"{prefix}layer.{i}."

        def split(t):
            return t.view(B, T, nh, dh).transpose(1, 2)

        q = split(_affine(x, w, p + "attention.q"))
        k = split(_affine(x, w, p + "attention.k"))
        v = split(_affine(x, w, p + "attention.v"))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(key_pad, float("-inf"))
        probs = drop(torch.softmax(scores, dim=-1))
        ctx = (probs @ v).transpose(1, 2).reshape(B, T, config.hidden)
        attn = drop(_affine(ctx, w, p + "attention.out"))
        x = layer_norm(x + attn, w, p + "attention_ln")
        ff = drop(_affine(gelu(_affine(x, w, p + "ffn.in")), w, p + "ffn.out"))
        x = layer_norm(x + ff, w, p + "ffn_ln")
        layers.append(x)
    wids = None if word_ids is None else np.asarray(word_ids)
    return ForwardTrace(hidden=x, attention_mask=mask, layers=layers, word_ids=wids)


def first_subword_positions(word_ids) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) of the first subword of each word, row-major over (sequence, word)."""
    wids = np.asarray(word_ids)
    rows, cols = [], []
    for b in range(wids.shape[0]):
        prev = None
        for t in range(wids.shape[1]):
            wid = int(wids[b, t])
            if wid != SPECIAL_WORD_ID and wid != prev:
                rows.append(b)
                cols.append(t)
            prev = wid if wid != SPECIAL_WORD_ID else None
    return np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)


def mlm_head(hidden: torch.Tensor, w: Mapping[str, torch.Tensor], prefix: str = "", embedding_prefix: str = "") -> torch.Tensor:
    """Vocab logits with the output projection tied to the token embeddings."""
    h = layer_norm(gelu(_affine(hidden, w, prefix + "head.mlm.dense")), w, prefix + "head.mlm.ln")
    return h @ w[embedding_prefix + "embeddings.token.weight"].T + w[prefix + "head.mlm.output.bias"]


def rtd_head(hidden: torch.Tensor, w: Mapping[str, torch.Tensor]) -> torch.Tensor:
    return _affine(gelu(_affine(hidden, w, "head.rtd.dense")), w, "head.rtd.output").squeeze(-1)


def head_forward(trace: ForwardTrace, kind: str, head_weights: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Task logits on top of an encoder trace.

    ``token_tag`` returns one row per word, taken at the word's first subword,
    ordered by (sequence, word); the prediction stands for the whole word.
    """
    w = head_weights
    h = trace.hidden
    try:
        if kind == "mlm":
            return mlm_head(h, w)
        if kind == "rtd_discriminate":
            return rtd_head(h, w)
        if kind == "cls_classify":
            return _affine(h[:, 0], w, "head.cls.output")
        if kind == "electra_pool_classify":
            per_pos = gelu(_affine(h, w, "head.pool.dense"))
            m = trace.attention_mask[..., None]
            pooled = (per_pos * m).sum(1) / m.sum(1).clamp_min(1.0)
            return _affine(pooled, w, "head.pool.output")
        if kind == "token_tag":
            if trace.word_ids is None:
                raise InputError("token_tag head needs word_ids in the trace")
            rows, cols = first_subword_positions(trace.word_ids)
            return _affine(h[torch.from_numpy(rows), torch.from_numpy(cols)], w, "head.tag.output")
    except KeyError as exc:
        raise ConfigurationError(f"head {kind!r} missing weight {exc.args[0]}") from None
    except RuntimeError as exc:
        raise ConfigurationError(f"head {kind!r} shape mismatch: {exc}") from None
    raise ConfigurationError(f"unknown head kind {kind!r}")


# -- gradients ----------------------------------------------------------------


@dataclass
class Batch:
    """Model inputs plus whichever targets the chosen loss needs.

    Token-level arrays are (batch, seq); ``IGNORE_INDEX`` marks unused targets.
    For ``electra``, ``input_ids`` is the generator's masked input and
    ``corrupted_ids`` (filled by sampling when absent) feeds the discriminator.
    """

    input_ids: np.ndarray
    attention_mask: np.ndarray
    word_ids: np.ndarray | None = None
    mlm_labels: np.ndarray | None = None
    corrupted_ids: np.ndarray | None = None
    disc_labels: np.ndarray | None = None
    labels: np.ndarray | None = None
    word_labels: np.ndarray | None = None


LOSS_KINDS = ("mlm", "electra", "cls_classify", "electra_pool_classify", "token_tag")


def loss_value(
    weights: Mapping[str, torch.Tensor],
    config: ModelConfig,
    batch: Batch,
    kind: str,
    *,
    train_mode: bool = False,
    seed: int = 0,
    lam: float = 50.0,
    rng: np.random.Generator | None = None,
    details: dict | None = None,
) -> torch.Tensor:
    from . import objectives

    if kind == "mlm":
        trace = encoder_forward(weights, config, batch.input_ids, batch.attention_mask, train_mode, seed)
        return objectives.mlm_loss_from_hidden(trace.hidden, weights, batch.mlm_labels)
    if kind == "electra":
        out = objectives.electra_forward(
            weights, config, batch, lam=lam, train_mode=train_mode, seed=seed, rng=rng
        )
        if details is not None:
            details.update(out)
        return out["loss"]
    if kind in ("cls_classify", "electra_pool_classify", "token_tag"):
        trace = encoder_forward(
            weights, config, batch.input_ids, batch.attention_mask, train_mode, seed, word_ids=batch.word_ids
        )
        logits = head_forward(trace, kind, weights)
        target = batch.word_labels if kind == "token_tag" else batch.labels
        return cross_entropy(logits, target)
    raise ConfigurationError(f"unknown loss kind {kind!r}")


def cross_entropy(logits: torch.Tensor, targets) -> torch.Tensor:
    """Mean negative log-likelihood over rows whose target is not ``IGNORE_INDEX``."""
    t = _as_long(targets).reshape(-1)
    flat = logits.reshape(t.shape[0], -1)
    keep = t != IGNORE_INDEX
    if not bool(keep.any()):
        raise NumericError("no labeled positions in batch", tensor="labels")
    logp = torch.log_softmax(flat[keep], dim=-1)
    return -logp.gather(1, t[keep][:, None]).mean()


def _check_finite(tensors: Mapping[str, torch.Tensor], what: str) -> None:
    for name, t in tensors.items():
        if not bool(torch.isfinite(t).all()):
            raise NumericError(f"non-finite {what} in tensor {name!r}", tensor=name)


def gradients_of(
    weights: Mapping[str, torch.Tensor], loss_fn: Callable[[Weights], torch.Tensor]
) -> tuple[float, Weights]:
    """Loss value and exact gradients for every tensor; unused tensors get zeros."""
    names = list(weights)
    params = {k: weights[k].detach().clone().requires_grad_(True) for k in names}
    loss = loss_fn(params)
    if not bool(torch.isfinite(loss)):
        _check_finite({k: weights[k] for k in names}, "weight")
        raise NumericError("non-finite loss", tensor="loss")
    grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    out = {
        k: (g.detach() if g is not None else torch.zeros_like(weights[k]))
        for k, g in zip(names, grads)
    }
    _check_finite(out, "gradient")
    return float(loss.detach()), out


def compute_gradients(
    weights: Mapping[str, torch.Tensor], config: ModelConfig, batch: Batch, kind: str, **kwargs
) -> tuple[float, Weights]:
    if kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss kind {kind!r}")
    return gradients_of(weights, lambda p: loss_value(p, config, batch, kind, **kwargs))

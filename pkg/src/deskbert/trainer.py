"""Adam with linear warmup/decay, the pretraining loop, and checkpoint I/O."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import struct
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np
import torch

from .corpus import PretrainExample, read_shard
from .errors import (
    CheckpointError,
    ConfigurationError,
    CorruptionError,
    FormatError,
    NumericError,
    VersionError,
)
from .model import DTYPE, ModelConfig, Weights, compute_gradients, init_weights
from .objectives import mask_batch

log = logging.getLogger(__name__)

MAGIC = b"GLMC"
FORMAT_VERSION = 1
DTYPE_CODES = {torch.float32: 1, torch.float64: 2, torch.int64: 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
NP_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8"}


def set_strict(strict: bool = True) -> None:
    """Fix thread count and kernel choice so runs repeat bit for bit."""
    if strict:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# -- schedule & optimizer -----------------------------------------------------


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp 0 -> base_lr over warmup, then linear decay to 0 at total_steps."""
    if not 0 <= warmup_steps < total_steps:
        raise ConfigurationError(f"need 0 <= warmup ({warmup_steps}) < total ({total_steps})")
    if step < 0 or step >= total_steps:
        return 0.0
    if step <= warmup_steps:
        return base_lr * (step / warmup_steps) if warmup_steps else base_lr
    return base_lr * ((total_steps - step) / (total_steps - warmup_steps))


def decays(name: str) -> bool:
    return not name.endswith((".bias", ".gain", ".shift"))


@dataclass
class OptimizerState:
    m: Weights
    v: Weights
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros_like(cls, weights: Mapping[str, torch.Tensor], **hyper) -> "OptimizerState":
        return cls(
            m={k: torch.zeros_like(w) for k, w in weights.items()},
            v={k: torch.zeros_like(w) for k, w in weights.items()},
            **hyper,
        )


def adam_step(
    state: OptimizerState, weights: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], lr: float
) -> tuple[OptimizerState, Weights]:
    """Bias-corrected Adam plus decoupled weight decay on non-bias, non-norm tensors."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_m, new_v, new_w = {}, {}, {}
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ConfigurationError(f"gradient shape {tuple(g.shape)} != weight shape {tuple(w.shape)} for {name}")
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient in tensor {name!r}", tensor=name)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        denom = torch.sqrt(v / c2) + state.eps
        update = torch.where(denom > 0, (m / c1) / torch.where(denom > 0, denom, 1.0), 0.0)
        if state.weight_decay and decays(name):
            update = update + state.weight_decay * w
        new_m[name], new_v[name] = m, v
        new_w[name] = w - lr * update
    return replace(state, m=new_m, v=new_v, t=t), new_w


def clip_by_global_norm(grads: Mapping[str, torch.Tensor], max_norm: float) -> tuple[Weights, float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# -- checkpoints --------------------------------------------------------------


@dataclass
class TrainState:
    step: int
    weights: Weights
    optimizer: OptimizerState
    rng_state: dict
    data_cursor: tuple[int, int] = (0, 0)


@dataclass
class Checkpoint:
    config: ModelConfig
    objective: str
    state: TrainState
    meta: dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _config_block(ckpt: Checkpoint) -> bytes:
    st = ckpt.state
    opt = st.optimizer
    items: list[tuple[str, str]] = [(f"model.{f.name}", _fmt(getattr(ckpt.config, f.name))) for f in fields(ckpt.config)]
    items += [
        ("objective", ckpt.objective),
        ("step", str(st.step)),
        ("optimizer.t", str(opt.t)),
        ("optimizer.beta1", repr(opt.beta1)),
        ("optimizer.beta2", repr(opt.beta2)),
        ("optimizer.eps", repr(opt.eps)),
        ("optimizer.weight_decay", repr(opt.weight_decay)),
    ]
    items += [(f"meta.{k}", v) for k, v in sorted(ckpt.meta.items())]
    for k, v in items:
        if "\n" in v or "=" in k:
            raise CheckpointError(f"config entry {k!r} not representable")
    return "".join(f"{k}={v}\n" for k, v in items).encode("utf-8")


def _tensor_record(name: str, tensor: torch.Tensor) -> bytes:
    t = tensor.detach().contiguous()
    code = DTYPE_CODES.get(t.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BB", code, t.dim())
    dims = struct.pack(f"<{t.dim()}Q", *t.shape)
    return head + dims + t.numpy().astype(NP_DTYPES[code], copy=False).tobytes()


def serialize_checkpoint(ckpt: Checkpoint, storage_dtype: torch.dtype = torch.float64) -> bytes:
    """Encode a checkpoint. Float64 storage keeps resumed runs bit-exact."""
    st = ckpt.state
    tensors: list[tuple[str, torch.Tensor]] = []
    for name, w in st.weights.items():
        tensors.append((name, w.to(storage_dtype)))
    for name in st.weights:
        tensors.append((f"optimizer.m/{name}", st.optimizer.m[name].to(storage_dtype)))
        tensors.append((f"optimizer.v/{name}", st.optimizer.v[name].to(storage_dtype)))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    cfg = _config_block(ckpt)
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        buf.write(_tensor_record(name, t))
    tail = json.dumps(
        {"rng": st.rng_state, "cursor": list(st.data_cursor)}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    buf.write(struct.pack("<I", len(tail)) + tail)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_config(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptionError(f"bad config line {line!r}")
        out[key] = value
    return out


def _model_config(kv: Mapping[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        raw = kv[f"model.{f.name}"]
        kwargs[f.name] = float(raw) if f.type in ("float", float) else int(raw)
    return ModelConfig(**kwargs)


def deserialize_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("not a checkpoint: bad magic bytes")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    (n,) = r.unpack("<I")
    try:
        kv = _parse_config(r.take(n).decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CorruptionError(f"config block is not UTF-8: {exc}") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8", errors="strict")
        code, rank = r.unpack("<BB")
        if code not in CODE_DTYPES:
            raise CorruptionError(f"unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        count_el = int(np.prod(dims)) if dims else 1
        itemsize = np.dtype(NP_DTYPES[code]).itemsize
        arr = np.frombuffer(r.take(count_el * itemsize), dtype=NP_DTYPES[code]).reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy()).to(DTYPE if code != 3 else torch.int64)
    (n,) = r.unpack("<I")
    try:
        tail = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"rng/cursor block unreadable: {exc}") from None
    if r.pos != len(data):
        raise CorruptionError(f"{len(data) - r.pos} trailing bytes after checkpoint")

    try:
        config = _model_config(kv)
        weights = {k: v for k, v in tensors.items() if not k.startswith("optimizer.")}
        opt = OptimizerState(
            m={k: tensors[f"optimizer.m/{k}"] for k in weights},
            v={k: tensors[f"optimizer.v/{k}"] for k in weights},
            t=int(kv["optimizer.t"]),
            beta1=float(kv["optimizer.beta1"]),
            beta2=float(kv["optimizer.beta2"]),
            eps=float(kv["optimizer.eps"]),
            weight_decay=float(kv["optimizer.weight_decay"]),
        )
        state = TrainState(
            step=int(kv["step"]),
            weights=weights,
            optimizer=opt,
            rng_state=tail["rng"],
            data_cursor=tuple(tail["cursor"]),
        )
        meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
        return Checkpoint(config, kv["objective"], state, meta, version)
    except (KeyError, ValueError) as exc:
        raise CorruptionError(f"incomplete checkpoint: {exc}") from None


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write atomically; an existing file may only be rewritten with identical bytes."""
    path = Path(path)
    data = serialize_checkpoint(ckpt)
    if path.exists():
        if path.read_bytes() == data:
            return path
        raise CheckpointError(f"{path} exists with different contents; checkpoints are immutable")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    return deserialize_checkpoint(Path(path).read_bytes())


# -- pretraining loop ---------------------------------------------------------


@dataclass
class PretrainParams:
    batch_size: int = 32
    base_lr: float = 1e-4
    warmup_steps: int = 10_000
    total_steps: int = 1_000_000
    checkpoint_every: int = 100_000
    seed: int = 42
    mask_mode: str = "token"
    mask_rate: float = 0.15
    lam: float = 50.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigurationError("need 0 <= warmup_steps < total_steps")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")
        if self.mask_mode not in ("token", "whole_word"):
            raise ConfigurationError(f"unknown mask mode {self.mask_mode!r}")


def checkpoint_steps(total_steps: int, checkpoint_every: int) -> list[int]:
    steps = list(range(checkpoint_every, total_steps + 1, checkpoint_every))
    if not steps or steps[-1] != total_steps:
        steps.append(total_steps)
    return steps


def checkpoint_path(out_dir: str | Path, step: int) -> Path:
    return Path(out_dir) / f"ckpt-{step:08d}.glmc"


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


class _Cursor:
    def __init__(self, shards: Sequence[Sequence[PretrainExample]], position: tuple[int, int]):
        self.shards = [s for s in shards]
        if not any(len(s) for s in self.shards):
            raise ConfigurationError("no pretraining examples in shards")
        self.shard, self.offset = position

    def take(self, n: int) -> list[PretrainExample]:
        out = []
        while len(out) < n:
            shard = self.shards[self.shard]
            if self.offset >= len(shard):
                self.shard = (self.shard + 1) % len(self.shards)
                self.offset = 0
                continue
            out.append(shard[self.offset])
            self.offset += 1
        return out

    @property
    def position(self) -> tuple[int, int]:
        return (self.shard, self.offset)


class Pretrainer:
    """Runs pretraining; ``history`` keeps (step, loss, lr, extras) per update."""

    def __init__(
        self,
        shards: Sequence[Sequence[PretrainExample]] | Sequence[str | Path],
        config: ModelConfig,
        objective: str,
        params: PretrainParams,
        out_dir: str | Path,
        log_path: str | Path | None = None,
        stdout: TextIO | None = sys.stdout,
    ):
        params.validate()
        if objective not in ("mlm", "electra"):
            raise ConfigurationError(f"unknown objective {objective!r}")
        if objective == "electra" and params.mask_mode != "token":
            raise ConfigurationError("whole word masking is a BERT-objective option")
        self.shards = [read_shard(s) if isinstance(s, (str, Path)) else list(s) for s in shards]
        if not self.shards:
            raise ConfigurationError("no shards given")
        self.config = config
        self.objective = objective
        self.params = params
        self.out_dir = Path(out_dir)
        self._prepare_out_dir()
        self.log_path = Path(log_path) if log_path else self.out_dir / "train_log.tsv"
        self.stdout = stdout
        self.history: list[tuple[int, float, float, dict]] = []
        self.skipped_batches = 0

    def _prepare_out_dir(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        probe = self.out_dir / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()

    def initial_state(self) -> TrainState:
        p = self.params
        weights = init_weights(self.config, p.seed, self.objective)
        opt = OptimizerState.zeros_like(
            weights, beta1=p.beta1, beta2=p.beta2, eps=p.eps, weight_decay=p.weight_decay
        )
        rng = np.random.default_rng(p.seed)
        return TrainState(0, weights, opt, rng.bit_generator.state, (0, 0))

    def meta(self) -> dict[str, str]:
        p = self.params
        return {
            "batch_size": str(p.batch_size),
            "base_lr": repr(p.base_lr),
            "warmup_steps": str(p.warmup_steps),
            "total_steps": str(p.total_steps),
            "checkpoint_every": str(p.checkpoint_every),
            "seed": str(p.seed),
            "mask_mode": p.mask_mode,
            "mask_rate": repr(p.mask_rate),
            "lam": repr(p.lam),
            "clip_norm": repr(p.clip_norm),
        }

    def train_step(self, state: TrainState, rng: np.random.Generator, cursor: _Cursor) -> tuple[TrainState, float, dict] | None:
        p = self.params
        examples = cursor.take(p.batch_size)
        batch = mask_batch([e.encoding for e in examples], p.mask_mode, p.mask_rate, rng, self.config.vocab_size)
        if not (batch.mlm_labels != -100).any():
            self.skipped_batches += 1
            return None
        details: dict = {}
        loss, grads = compute_gradients(
            state.weights,
            self.config,
            batch,
            self.objective,
            train_mode=True,
            seed=step_seed(p.seed, state.step),
            lam=p.lam,
            rng=rng,
            details=details,
        )
        grads, norm = clip_by_global_norm(grads, p.clip_norm)
        lr = lr_at(state.step, p.base_lr, p.warmup_steps, p.total_steps)
        opt, weights = adam_step(state.optimizer, state.weights, grads, lr)
        extras = {"grad_norm": norm, "lr": lr}
        if self.objective == "electra":
            extras["gen_loss"] = float(details["gen_loss"].detach())
            extras["disc_loss"] = float(details["disc_loss"].detach())
        new = TrainState(state.step + 1, weights, opt, state.rng_state, cursor.position)
        return new, loss, extras

    def run(self, resume: Checkpoint | str | Path | None = None, stop_at: int | None = None) -> list[Path]:
        p = self.params
        if isinstance(resume, (str, Path)):
            resume = load_checkpoint(resume)
        state = resume.state if resume is not None else self.initial_state()
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        cursor = _Cursor(self.shards, state.data_cursor)
        wanted = set(checkpoint_steps(p.total_steps, p.checkpoint_every))
        end = p.total_steps if stop_at is None else min(stop_at, p.total_steps)
        paths: list[Path] = []
        mode = "a" if resume is not None else "w"
        with open(self.log_path, mode, encoding="utf-8") as log_fh:
            while state.step < end:
                out = self.train_step(state, rng, cursor)
                if out is None:
                    continue
                state, loss, extras = out
                lr = extras["lr"]
                line = f"{state.step}\t{loss:.6f}\t{lr:.6e}"
                log_fh.write(line + "\n")
                if self.stdout is not None:
                    print(line, file=self.stdout)
                self.history.append((state.step, loss, lr, extras))
                if state.step in wanted:
                    state.rng_state = rng.bit_generator.state
                    ckpt = Checkpoint(self.config, self.objective, state, self.meta())
                    paths.append(save_checkpoint(ckpt, checkpoint_path(self.out_dir, state.step)))
                    log_fh.flush()
        state.rng_state = rng.bit_generator.state
        self.final_state = state
        return paths


def pretrain(
    shards,
    config: ModelConfig,
    objective: str,
    params: PretrainParams,
    out_dir: str | Path,
    log_path: str | Path | None = None,
    stdout: TextIO | None = sys.stdout,
    resume: Checkpoint | str | Path | None = None,
    stop_at: int | None = None,
) -> list[Path]:
    """Train and return the paths of the checkpoints written by this call."""
    trainer = Pretrainer(shards, config, objective, params, out_dir, log_path=log_path, stdout=stdout)
    return trainer.run(resume=resume, stop_at=stop_at)

"""Command-line entry point: build-vocab, pretrain, finetune, evaluate-checkpoints, select."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .errors import DeskBertError

log = logging.getLogger("deskbert")

SUBCOMMANDS = ("build-vocab", "pretrain", "finetune", "evaluate-checkpoints", "select")

REQUIRED = {
    "build-vocab": ("corpus", "size", "out"),
    "pretrain": ("arch", "corpus", "vocab", "steps", "checkpoint_every", "out"),
    "finetune": ("checkpoint", "vocab", "task_kind", "data"),
    "evaluate-checkpoints": ("checkpoints", "vocab", "task", "report"),
    "select": ("report",),
}

TRUE = {"1", "true", "yes", "on"}
FALSE = {"0", "false", "no", "off"}


class UsageError(Exception):
    pass


def read_config(path: str | Path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; dashes in keys map to underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--strict", action="store_true", default=False, help="bitwise-deterministic mode")
    p.add_argument("--config", help="key=value file; flags given on the command line win")
    p.add_argument("-v", "--verbose", action="store_true", default=False)


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ffn-dim", type=int, default=0, help="0 means 4 x hidden")
    p.add_argument("--max-seq-len", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.1)


def _task_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("fine-tuning overrides (defaults follow the full-scale task presets)")
    g.add_argument("--ft-lr", type=float)
    g.add_argument("--ft-epochs", type=int)
    g.add_argument("--ft-max-steps", type=int)
    g.add_argument("--ft-eval-every", type=int)
    g.add_argument("--ft-batch-size", type=int)
    g.add_argument("--ft-max-seq-len", type=int)
    g.add_argument("--patience", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskbert", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("build-vocab", help="frequency-ranked WordPiece vocabulary")
    p.add_argument("--corpus")
    p.add_argument("--size", type=int)
    p.add_argument("--out")
    p.add_argument("--blocklist")
    _common(p)

    p = sub.add_parser("pretrain", help="MLM/WWM or ELECTRA pretraining with periodic checkpoints")
    p.add_argument("--arch", choices=("bert", "electra"))
    p.add_argument("--wwm", action="store_true", default=False, help="whole word masking (bert only)")
    p.add_argument("--corpus", help="directory of text files or of .bin shards")
    p.add_argument("--vocab")
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--out")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--warmup", type=int, help="default: min(10000, steps // 10)")
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--lam", type=float, default=50.0, help="discriminator loss weight")
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--blocklist")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log", help="training log path (default OUT/train_log.tsv)")
    _model_flags(p)
    _common(p)

    p = sub.add_parser("finetune", help="one fine-tuning run of one checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--task-kind", choices=("classification", "ner"))
    p.add_argument("--data", help="directory with train/dev/test .tsv or .conll")
    p.add_argument("--name", default="task")
    p.add_argument("--out", help="append the result row to this TSV file")
    _task_flags(p)
    _common(p)

    p = sub.add_parser("evaluate-checkpoints", help="score every checkpoint in a directory")
    p.add_argument("--checkpoints")
    p.add_argument("--vocab")
    p.add_argument("--task", action="append", help="NAME:KIND:DIR, repeatable")
    p.add_argument("--seeds", help="comma-separated; default seed, seed+1, seed+2")
    p.add_argument("--report")
    p.add_argument("--figure", help="default: report path with .png")
    p.add_argument("--jobs", type=int, default=1)
    _task_flags(p)
    _common(p)

    p = sub.add_parser("select", help="aggregate a report and print the selected checkpoint")
    p.add_argument("--report")
    p.add_argument("--out", help="write the full report (records, averages, selection) here")
    p.add_argument("--figure")
    _common(p)
    return parser


def _coerce(parser: argparse.ArgumentParser, action: argparse.Action, value: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        low = value.lower()
        if low not in TRUE | FALSE:
            raise UsageError(f"config value for {action.dest} must be a boolean, got {value!r}")
        return low in TRUE
    if isinstance(action, argparse._AppendAction):
        return [v.strip() for v in value.split(",") if v.strip()]
    if action.type is not None:
        try:
            return action.type(value)
        except ValueError:
            raise UsageError(f"bad config value for {action.dest}: {value!r}") from None
    if action.choices and value not in action.choices:
        raise UsageError(f"config value for {action.dest} must be one of {action.choices}")
    return value


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse and validate; usage problems exit with status 2."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        parser.exit(2, "deskbert: error: a command is required\n")
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a command is required")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        if args.config:
            actions = {a.dest: a for a in sub._actions}
            explicit = _explicit_dests(sub, argv[1:])
            for key, value in read_config(args.config).items():
                if key not in actions or key in ("help", "config"):
                    raise UsageError(f"unknown config key {key!r} for {args.command}")
                if key not in explicit:
                    setattr(args, key, _coerce(sub, actions[key], value))
        missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) in (None, [])]
        if missing:
            raise UsageError("missing required flag(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
        if args.command == "pretrain":
            if args.wwm and args.arch == "electra":
                raise UsageError("--wwm is a BERT-objective option and cannot be used with --arch electra")
            if args.warmup is None:
                args.warmup = min(10_000, args.steps // 10)
        if args.command == "evaluate-checkpoints":
            args.task_specs = [_parse_task(t) for t in args.task]
            args.seed_list = _parse_seeds(args.seeds, args.seed)
    except (UsageError, OSError) as exc:
        sub.error(str(exc))
    return args


def _explicit_dests(sub: argparse.ArgumentParser, argv: Sequence[str]) -> set[str]:
    dests = set()
    for action in sub._actions:
        for opt in action.option_strings:
            if any(a == opt or a.startswith(opt + "=") for a in argv):
                dests.add(action.dest)
    return dests


def _parse_task(text: str) -> tuple[str, str, str]:
    parts = text.split(":", 2)
    if len(parts) != 3 or parts[1] not in ("classification", "ner") or not parts[0]:
        raise UsageError(f"--task must be NAME:classification|ner:DIR, got {text!r}")
    return parts[0], parts[1], parts[2]


def _parse_seeds(text: str | None, seed: int) -> list[int]:
    if text is None:
        return [seed, seed + 1, seed + 2]
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if len(set(seeds)) != len(seeds):
        raise UsageError(f"duplicate seeds in {seeds}")
    return seeds


# -- commands -----------------------------------------------------------------


def _task_overrides(args) -> dict:
    pairs = {
        "lr": args.ft_lr,
        "max_epochs": args.ft_epochs,
        "max_train_steps": args.ft_max_steps,
        "eval_every_steps": args.ft_eval_every,
        "batch_size": args.ft_batch_size,
        "max_seq_len": args.ft_max_seq_len,
        "patience": args.patience,
    }
    return {k: v for k, v in pairs.items() if v is not None}


def cmd_build_vocab(args) -> int:
    from .corpus import filter_documents, read_blocklist, read_documents
    from .tokenizer import build_vocab

    docs = read_documents(args.corpus)
    if args.blocklist:
        docs = filter_documents(docs, read_blocklist(args.blocklist))
    vocab = build_vocab((d.text for d in docs), args.size)
    vocab.save(args.out)
    log.info("wrote %d tokens to %s", len(vocab), args.out)
    return 0


def cmd_pretrain(args) -> int:
    from .corpus import PackStats, build_examples, read_blocklist, read_documents, write_shards
    from .model import ModelConfig
    from .tokenizer import Vocab
    from .trainer import PretrainParams, Pretrainer

    out = Path(args.out)
    vocab = Vocab.load(args.vocab)
    config = ModelConfig(
        layers=args.layers,
        hidden=args.hidden,
        heads=args.heads,
        vocab_size=len(vocab),
        max_seq_len=args.max_seq_len,
        ffn_dim=args.ffn_dim,
        dropout=args.dropout,
    )
    params = PretrainParams(
        batch_size=args.batch_size,
        base_lr=args.lr,
        warmup_steps=args.warmup,
        total_steps=args.steps,
        checkpoint_every=args.checkpoint_every,
        seed=args.seed,
        mask_mode="whole_word" if args.wwm else "token",
        mask_rate=args.mask_rate,
        lam=args.lam,
        weight_decay=args.weight_decay,
    )
    objective = "electra" if args.arch == "electra" else "mlm"
    params.validate()
    out.mkdir(parents=True, exist_ok=True)

    corpus = Path(args.corpus)
    shard_paths = sorted(corpus.glob("*.bin"))
    if not shard_paths:
        blocklist = read_blocklist(args.blocklist) if args.blocklist else []
        stats = PackStats()
        examples = build_examples(read_documents(corpus), vocab, config.max_seq_len, blocklist, args.seed, stats)
        if stats.truncated_words:
            log.warning("%d over-long words were truncated", stats.truncated_words)
        shard_paths = write_shards(examples, out / "shards")
        log.info("packed %d examples into %d shard(s)", len(examples), len(shard_paths))
    trainer = Pretrainer(shard_paths, config, objective, params, out, log_path=args.log)
    paths = trainer.run(resume=args.resume)
    for p in paths:
        log.info("checkpoint %s", p)
    return 0


def cmd_finetune(args) -> int:
    from .finetune import finetune_run, format_run_row, load_task_data, make_task
    from .tokenizer import Vocab

    data = load_task_data(args.task_kind, args.data)
    task = make_task(args.task_kind, data, **_task_overrides(args))
    result = finetune_run(args.checkpoint, task, data, args.seed, Vocab.load(args.vocab))
    row = format_run_row(args.name, result)
    print(row)
    if args.out:
        with open(args.out, "a", encoding="utf-8") as fh:
            fh.write(row + "\n")
    return 0


def cmd_evaluate(args) -> int:
    from .finetune import load_task_data, make_task
    from .plotting import plot_selection
    from .selection import DownstreamTask, build_report, evaluate_checkpoint, write_report
    from .tokenizer import Vocab

    vocab = Vocab.load(args.vocab)
    tasks = []
    for name, kind, directory in args.task_specs:
        data = load_task_data(kind, directory)
        tasks.append(DownstreamTask(name, make_task(kind, data, **_task_overrides(args)), data))
    ckpts = sorted(Path(args.checkpoints).glob("*.glmc"))
    if not ckpts:
        raise DeskBertError(f"no .glmc checkpoints in {args.checkpoints}")
    records = []
    for path in ckpts:
        log.info("evaluating %s", path)
        records.extend(evaluate_checkpoint(path, tasks, args.seed_list, vocab, jobs=args.jobs))
    report = build_report(records, [t.name for t in tasks])
    write_report(report, args.report)
    figure = args.figure or str(Path(args.report).with_suffix(".png"))
    plot_selection(report, figure)
    print(f"selected\t{report.selected_step}")
    return 0


def cmd_select(args) -> int:
    from .plotting import plot_selection
    from .selection import build_report, format_report, pct, read_records, write_report

    report = build_report(read_records(args.report))
    print("step\tavg_f1")
    for step, avg in sorted(report.averaged.items()):
        print(f"{step}\t{pct(avg)}")
    print(f"selected\t{report.selected_step}")
    if args.out:
        write_report(report, args.out)
    if args.figure:
        plot_selection(report, args.figure)
    return 0


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate-checkpoints": cmd_evaluate,
    "select": cmd_select,
}


def run(args: argparse.Namespace) -> int:
    """Dispatch a parsed command; runtime errors become exit status 1."""
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.strict:
        from .trainer import set_strict

        set_strict(True)
    try:
        return COMMANDS[args.command](args)
    except (DeskBertError, OSError, ValueError, KeyError) as exc:
        print(f"deskbert: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv: Sequence[str] | None = None) -> int:
    return run(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())

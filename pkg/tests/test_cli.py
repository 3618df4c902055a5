import pytest

from deskbert import synthetic
from deskbert.cli import main, parse_args, read_config
from deskbert.selection import read_records

PRETRAIN = ["pretrain", "--arch", "bert", "--corpus", "d/", "--vocab", "v.txt", "--steps", "2000", "--checkpoint-every", "500", "--out", "o/"]


class TestParse:
    def test_pretrain_wwm(self):
        args = parse_args(PRETRAIN[:2] + ["bert", "--wwm"] + PRETRAIN[3:])
        assert args.command == "pretrain" and args.wwm and args.arch == "bert"
        assert args.seed == 42 and not args.strict
        assert args.warmup == 200

    def test_electra_rejects_wwm(self, capsys):
        with pytest.raises(SystemExit) as exc:
            parse_args(["pretrain", "--arch", "electra", "--wwm"] + PRETRAIN[3:])
        assert exc.value.code == 2
        assert "--wwm" in capsys.readouterr().err

    def test_no_arguments(self, capsys):
        with pytest.raises(SystemExit) as exc:
            parse_args([])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_missing_required(self, capsys):
        with pytest.raises(SystemExit) as exc:
            parse_args(["pretrain", "--arch", "bert"])
        assert exc.value.code == 2
        assert "--corpus" in capsys.readouterr().err

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            parse_args(PRETRAIN + ["--bogus"])
        assert exc.value.code == 2

    def test_config_then_flags(self, tmp_path):
        cfg = tmp_path / "m.cfg"
        cfg.write_text("# preset\narch = electra\nlayers=4\nsteps=100\ncheckpoint-every=10\nlr=3e-4\n")
        args = parse_args(["pretrain", "--config", str(cfg), "--corpus", "c", "--vocab", "v", "--out", "o", "--layers", "3"])
        assert args.arch == "electra" and args.layers == 3 and args.lr == 3e-4 and args.warmup == 10

    def test_config_rejects_unknown_key(self, tmp_path):
        cfg = tmp_path / "m.cfg"
        cfg.write_text("colour=blue\n")
        with pytest.raises(SystemExit):
            parse_args(PRETRAIN + ["--config", str(cfg)])

    def test_shipped_presets_parse(self):
        from pathlib import Path

        presets = sorted((Path(__file__).parent.parent / "presets").glob("*.cfg"))
        assert len(presets) >= 4
        for p in presets:
            args = parse_args(["pretrain", "--config", str(p), "--corpus", "c", "--vocab", "v", "--out", "o"])
            assert args.steps % args.checkpoint_every == 0 or args.steps > args.checkpoint_every
            assert read_config(p)["arch"] in ("bert", "electra")

    def test_evaluate_seeds_and_tasks(self):
        args = parse_args(["evaluate-checkpoints", "--checkpoints", "c", "--vocab", "v", "--report", "r",
                           "--task", "coarse:classification:a", "--task", "ner:ner:b", "--seed", "7"])
        assert args.seed_list == [7, 8, 9]
        assert args.task_specs == [("coarse", "classification", "a"), ("ner", "ner", "b")]
        with pytest.raises(SystemExit):
            parse_args(["evaluate-checkpoints", "--checkpoints", "c", "--vocab", "v", "--report", "r", "--task", "x:regression:a"])


def test_unwritable_out_fails_before_training(tmp_path, capsys):
    lang = synthetic.Language.generate(seed=0, n_names=50)
    synthetic.write_corpus(synthetic.pretraining_corpus(lang, 5000), tmp_path / "corpus")
    assert main(["build-vocab", "--corpus", str(tmp_path / "corpus"), "--size", "80", "--out", str(tmp_path / "v.txt")]) == 0
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = main(["pretrain", "--arch", "bert", "--corpus", str(tmp_path / "corpus"), "--vocab", str(tmp_path / "v.txt"),
                 "--steps", "4", "--checkpoint-every", "2", "--out", str(blocker / "out"), "--warmup", "1"])
    captured = capsys.readouterr()
    assert code == 1
    assert "deskbert: pretrain:" in captured.err
    assert captured.out == ""  # no training log line was produced


def test_runtime_error_exit_status(tmp_path, capsys):
    assert main(["select", "--report", str(tmp_path / "missing.tsv")]) == 1
    assert "deskbert: select:" in capsys.readouterr().err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    lang = synthetic.Language.generate(seed=0, n_names=200)
    synthetic.write_corpus(synthetic.pretraining_corpus(lang, 30_000), root / "corpus", docs_per_file=50)
    synthetic.write_classification(synthetic.topic_classification(lang, n_train=24, n_dev=8, n_test=8), root / "coarse")
    synthetic.write_classification(synthetic.topic_classification(lang, n_train=24, n_dev=8, n_test=8, seed=9), root / "fine")
    synthetic.write_ner(synthetic.ner_task(lang, n_train=12, n_dev=4, n_test=4), root / "ner")
    return root


def _pipeline(root, tag):
    out = root / tag
    out.mkdir()
    ft = ["--ft-lr", "1e-3", "--ft-epochs", "1", "--ft-max-steps", "2", "--ft-eval-every", "1",
          "--ft-batch-size", "8", "--ft-max-seq-len", "24"]
    assert main(["build-vocab", "--corpus", str(root / "corpus"), "--size", "150", "--out", str(out / "vocab.txt"), "--strict"]) == 0
    assert main(["pretrain", "--arch", "bert", "--wwm", "--corpus", str(root / "corpus"), "--vocab", str(out / "vocab.txt"),
                 "--steps", "8", "--checkpoint-every", "2", "--warmup", "2", "--out", str(out / "run"),
                 "--layers", "1", "--hidden", "8", "--heads", "2", "--max-seq-len", "24", "--batch-size", "4", "--strict"]) == 0
    assert main(["evaluate-checkpoints", "--checkpoints", str(out / "run"), "--vocab", str(out / "vocab.txt"),
                 "--task", f"coarse:classification:{root / 'coarse'}", "--task", f"fine:classification:{root / 'fine'}",
                 "--task", f"ner:ner:{root / 'ner'}", "--report", str(out / "report.tsv"), "--strict"] + ft) == 0
    assert main(["finetune", "--checkpoint", str(out / "run" / "ckpt-00000008.glmc"), "--vocab", str(out / "vocab.txt"),
                 "--task-kind", "ner", "--data", str(root / "ner"), "--name", "ner", "--out", str(out / "runs.tsv"), "--strict"] + ft) == 0
    return out


@pytest.fixture(scope="module")
def runs(workspace):
    return _pipeline(workspace, "a"), _pipeline(workspace, "b")


class TestEndToEnd:
    def test_checkpoints_and_records(self, runs):
        a, _ = runs
        assert len(list((a / "run").glob("*.glmc"))) == 4
        records = read_records(a / "report.tsv")
        assert len(records) == 28
        assert (a / "report.png").stat().st_size > 0

    def test_select(self, runs, capsys):
        a, _ = runs
        capsys.readouterr()
        assert main(["select", "--report", str(a / "report.tsv"), "--figure", str(a / "sel.png")]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "step\tavg_f1"
        assert out[-1].startswith("selected\t")
        assert int(out[-1].split("\t")[1]) in (2, 4, 6, 8)
        assert (a / "sel.png").exists()

    def test_finetune_row(self, runs):
        a, _ = runs
        (row,) = (a / "runs.tsv").read_text().splitlines()
        assert row.startswith("ner\t42\t") and row.endswith("\tfalse")

    @pytest.mark.parametrize("name", ["vocab.txt", "run/ckpt-00000002.glmc", "run/ckpt-00000008.glmc", "run/train_log.tsv",
                                      "report.tsv", "report.png", "runs.tsv"])
    def test_strict_artifacts_identical(self, runs, name):
        a, b = runs
        assert (a / name).read_bytes() == (b / name).read_bytes()

import math
import struct

import numpy as np
import pytest
import torch

from conftest import micro_params
from oracles import adam_reference
from deskbert.errors import CheckpointError, ConfigurationError, CorruptionError, FormatError, NumericError, VersionError
from deskbert.trainer import (
    Checkpoint,
    OptimizerState,
    Pretrainer,
    adam_step,
    checkpoint_path,
    checkpoint_steps,
    clip_by_global_norm,
    deserialize_checkpoint,
    load_checkpoint,
    lr_at,
    pretrain,
    save_checkpoint,
    serialize_checkpoint,
)


class TestSchedule:
    def test_examples(self):
        assert lr_at(0, 1e-4, 10_000, 1_000_000) == 0.0
        assert lr_at(10_000, 1e-4, 10_000, 1_000_000) == 1e-4
        assert lr_at(505_000, 1e-4, 10_000, 1_000_000) == 5e-5

    def test_past_end(self):
        assert lr_at(1_000_001, 1e-4, 10_000, 1_000_000) == 0.0
        assert lr_at(1_000_000, 1e-4, 10_000, 1_000_000) == 0.0

    def test_piecewise_linear_and_peak(self):
        lrs = [lr_at(s, 2e-4, 30, 200) for s in range(201)]
        assert max(lrs) == 2e-4 == lrs[30]
        assert lrs.index(max(lrs)) == 30
        # constant slope within each piece
        up = np.diff(lrs[:31])
        down = np.diff(lrs[30:])
        assert np.allclose(up, up[0], rtol=1e-9)
        assert np.allclose(down, down[0], rtol=1e-9)
        # continuity: no jump bigger than one slope step
        assert np.abs(np.diff(lrs)).max() <= max(abs(up[0]), abs(down[0])) * (1 + 1e-9)

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            lr_at(0, 1e-4, 100, 100)


def _scalar(name="w", value=0.0):
    return {name: torch.tensor([value], dtype=torch.float64)}


class TestAdam:
    def test_zero_grad_only_decays(self):
        w = {"x.weight": torch.full((3,), 2.0, dtype=torch.float64), "x.bias": torch.full((3,), 2.0, dtype=torch.float64)}
        state = OptimizerState.zeros_like(w, weight_decay=0.01)
        zeros = {k: torch.zeros_like(v) for k, v in w.items()}
        _, new = adam_step(state, w, zeros, lr=0.1)
        assert torch.equal(new["x.weight"], w["x.weight"] * (1 - 0.1 * 0.01))
        assert torch.equal(new["x.bias"], w["x.bias"])

    def test_first_step_is_sign(self):
        w = _scalar("p.weight", 1.0)
        state = OptimizerState.zeros_like(w, weight_decay=0.0)
        for g in (3.7, -0.002):
            _, new = adam_step(state, w, _scalar("p.weight", g), lr=0.01)
            assert float(new["p.weight"] - w["p.weight"]) == pytest.approx(-0.01 * math.copysign(1, g), rel=1e-5)

    def test_two_constant_steps(self):
        w = _scalar("p.weight")
        state = OptimizerState.zeros_like(w, eps=0.0, weight_decay=0.0)
        g = _scalar("p.weight", 1.0)
        for _ in range(2):
            state, w = adam_step(state, w, g, lr=0.1)
        assert float(w["p.weight"]) == pytest.approx(-0.2, abs=1e-15)
        assert state.t == 2

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=25).tolist()
        w = _scalar("p.weight", 0.5)
        state = OptimizerState.zeros_like(w, weight_decay=0.01)
        for g in grads:
            state, w = adam_step(state, w, _scalar("p.weight", g), lr=0.03)
        assert float(w["p.weight"]) == pytest.approx(adam_reference(grads, 0.03, wd=0.01, w0=0.5), rel=1e-12)

    def test_non_finite_gradient_named(self):
        w = _scalar("layer.0.ffn.in.weight", 1.0)
        state = OptimizerState.zeros_like(w)
        with pytest.raises(NumericError, match="layer.0.ffn.in.weight"):
            adam_step(state, w, _scalar("layer.0.ffn.in.weight", float("inf")), lr=0.1)


def test_clip_by_global_norm():
    g = {"a": torch.tensor([3.0, 0.0], dtype=torch.float64), "b": torch.tensor([4.0], dtype=torch.float64)}
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert float(torch.cat([clipped["a"], clipped["b"]]).norm()) == pytest.approx(1.0, abs=1e-15)
    same, _ = clip_by_global_norm(g, 10.0)
    assert all(torch.equal(same[k], g[k]) for k in g)


def test_checkpoint_cadence():
    assert len(checkpoint_steps(4_000_000, 100_000)) == 40
    assert checkpoint_steps(2000, 500) == [500, 1000, 1500, 2000]
    assert checkpoint_steps(766_000, 76_600)[-1] == 766_000
    assert checkpoint_steps(25, 10) == [10, 20, 25]


# -- checkpoints and the training loop ----------------------------------------


@pytest.fixture(scope="module")
def short_run(tmp_path_factory, toy_examples, micro_config):
    out = tmp_path_factory.mktemp("run")
    trainer = Pretrainer([toy_examples], micro_config, "mlm", micro_params(), out, stdout=None)
    paths = trainer.run()
    return trainer, paths, out


class TestCheckpointFile:
    def test_round_trip_bytes(self, short_run):
        _, paths, _ = short_run
        data = paths[-1].read_bytes()
        assert serialize_checkpoint(deserialize_checkpoint(data)) == data

    def test_state_restored(self, short_run):
        trainer, paths, _ = short_run
        ckpt = load_checkpoint(paths[-1])
        assert ckpt.state.step == 20
        assert ckpt.objective == "mlm"
        assert ckpt.config == trainer.config
        assert ckpt.state.rng_state == trainer.final_state.rng_state
        assert ckpt.state.data_cursor == trainer.final_state.data_cursor
        assert all(torch.equal(ckpt.state.weights[k], trainer.final_state.weights[k]) for k in ckpt.state.weights)
        assert ckpt.state.optimizer.t == 20

    def test_layout(self, short_run):
        data = short_run[1][0].read_bytes()
        assert data[:4] == b"GLMC"
        assert struct.unpack("<I", data[4:8]) == (1,)
        (n,) = struct.unpack("<I", data[8:12])
        block = data[12 : 12 + n].decode("utf-8")
        assert "model.hidden=8\n" in block
        assert "objective=mlm\n" in block

    def test_bad_magic(self, short_run):
        data = bytearray(short_run[1][0].read_bytes())
        data[:4] = b"XXXX"
        with pytest.raises(FormatError):
            deserialize_checkpoint(bytes(data))

    def test_version_mismatch(self, short_run):
        data = bytearray(short_run[1][0].read_bytes())
        data[4:8] = struct.pack("<I", 99)
        with pytest.raises(VersionError):
            deserialize_checkpoint(bytes(data))

    @pytest.mark.parametrize("cut", [0.1, 0.5, 0.999])
    def test_truncated(self, short_run, cut):
        data = short_run[1][0].read_bytes()
        with pytest.raises(CorruptionError):
            deserialize_checkpoint(data[: int(len(data) * cut)])

    def test_trailing_bytes(self, short_run):
        with pytest.raises(CorruptionError):
            deserialize_checkpoint(short_run[1][0].read_bytes() + b"\0")

    def test_immutable(self, short_run, tmp_path):
        ckpt = load_checkpoint(short_run[1][0])
        path = save_checkpoint(ckpt, tmp_path / "c.glmc")
        save_checkpoint(ckpt, path)  # identical bytes: fine
        other = load_checkpoint(short_run[1][1])
        with pytest.raises(CheckpointError):
            save_checkpoint(other, path)


class TestPretrain:
    def test_paths_and_log(self, short_run):
        trainer, paths, out = short_run
        assert paths == [checkpoint_path(out, 10), checkpoint_path(out, 20)]
        lines = (out / "train_log.tsv").read_text().splitlines()
        assert len(lines) == 20
        step, loss, lr = lines[4].split("\t")
        assert int(step) == 5 and float(loss) > 0 and float(lr) == pytest.approx(lr_at(4, 1e-3, 5, 20))

    def test_stdout_log(self, toy_examples, micro_config, tmp_path, capsys):
        import sys

        pretrain([toy_examples], micro_config, "mlm", micro_params(total_steps=3, checkpoint_every=3, warmup_steps=1), tmp_path, stdout=sys.stdout)
        assert capsys.readouterr().out.splitlines()[0].startswith("1\t")

    def test_deterministic(self, short_run, toy_examples, micro_config, tmp_path):
        paths = pretrain([toy_examples], micro_config, "mlm", micro_params(), tmp_path, stdout=None)
        assert paths[-1].read_bytes() == short_run[1][-1].read_bytes()

    def test_resume_matches_uninterrupted(self, short_run, toy_examples, micro_config, tmp_path):
        first = Pretrainer([toy_examples], micro_config, "mlm", micro_params(), tmp_path, stdout=None)
        (mid,) = first.run(stop_at=10)
        second = Pretrainer([toy_examples], micro_config, "mlm", micro_params(), tmp_path, stdout=None)
        final = second.run(resume=mid)
        assert final[-1].read_bytes() == short_run[1][-1].read_bytes()
        assert len((tmp_path / "train_log.tsv").read_text().splitlines()) == 20

    def test_electra_runs(self, toy_examples, micro_config, tmp_path):
        cfg = micro_config.__class__(**{**micro_config.to_dict(), "hidden": 12, "heads": 2, "ffn_dim": 0})
        trainer = Pretrainer([toy_examples], cfg, "electra", micro_params(total_steps=4, checkpoint_every=4, warmup_steps=1), tmp_path, stdout=None)
        (path,) = trainer.run()
        assert load_checkpoint(path).objective == "electra"
        extras = trainer.history[-1][3]
        assert extras["gen_loss"] > 0 and 0 < extras["disc_loss"] < 5

    def test_electra_rejects_whole_word(self, toy_examples, micro_config, tmp_path):
        with pytest.raises(ConfigurationError):
            Pretrainer([toy_examples], micro_config, "electra", micro_params(mask_mode="whole_word"), tmp_path)

    def test_unwritable_out_dir(self, toy_examples, micro_config, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            Pretrainer([toy_examples], micro_config, "mlm", micro_params(), blocker / "out")

    def test_shards_from_files(self, toy_examples, micro_config, tmp_path):
        from deskbert.corpus import write_shards

        paths = write_shards(toy_examples, tmp_path / "shards", examples_per_shard=50)
        trainer = Pretrainer(paths, micro_config, "mlm", micro_params(total_steps=2, checkpoint_every=2, warmup_steps=1), tmp_path / "o", stdout=None)
        assert sum(len(s) for s in trainer.shards) == len(toy_examples)
        assert trainer.run()


def test_checkpoint_carries_meta(short_run):
    ckpt: Checkpoint = load_checkpoint(short_run[1][0])
    assert ckpt.meta["mask_mode"] == "token"
    assert ckpt.meta["total_steps"] == "20"

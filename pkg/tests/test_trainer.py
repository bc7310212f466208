import json
import math

import numpy as np
import pytest

from conftest import tiny_config
from grank.checkpoint import load_model, read_checkpoint, save_checkpoint
from grank.data import batch_iterator
from grank.errors import ConfigError, NonFiniteError, ParseError
from grank.model import GRankModel
from grank.numeric import grad_check, ops, precision
from grank.trainer import Adam, total_loss, train_loop, train_step


def make(cfg, data, seed=0):
    train, _ = data
    return GRankModel(cfg, train.n_items, train.demographics_width, seed=seed)


def first_batch(data, cfg):
    return next(batch_iterator(data[0], cfg.trainer.batch_size, 0))


class TestTotalLoss:
    def test_single_weight_equals_ntp(self, tiny_data):
        cfg = tiny_config()
        model = make(cfg, tiny_data)
        col = model.collate(first_batch(tiny_data, cfg).users)
        only = total_loss(model, col, (1, 0, 0))
        both = total_loss(model, col, (1, 1, 1))
        assert only.sa is None and only.ca is None
        assert only.total.item() == pytest.approx(both.ntp.item(), rel=1e-6)

    def test_zero_weight_skips_head_work(self, tiny_data):
        cfg = tiny_config()
        model = make(cfg, tiny_data)
        col = model.collate(first_batch(tiny_data, cfg).users)
        before = model.generator.aux_tokens_processed
        total_loss(model, col, (1, 0, 1))
        assert model.generator.aux_tokens_processed == before
        total_loss(model, col, (1, 1, 0))
        assert model.generator.aux_tokens_processed > before

    def test_uniform_scores_sum_to_three_ln_b(self):
        b = 16
        flat = ops.cross_entropy(ops.as_tensor(np.zeros((b, b))), np.arange(b)).item()
        assert 3 * flat == pytest.approx(3 * math.log(b))

    def test_gradient_of_sum_is_sum_of_gradients(self, tiny_data):
        with precision("64"):
            cfg = tiny_config()
            model = make(cfg, tiny_data)
            model.cast(np.float64)
            col = model.collate(first_batch(tiny_data, cfg).users)
            params = model.parameter_dict()
            grads = []
            for w in ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)):
                for p in params.values():
                    p.zero_grad()
                total_loss(model, col, w).total.backward()
                grads.append({k: p.grad.copy() for k, p in params.items()})
            for k in params:
                np.testing.assert_allclose(grads[3][k], grads[0][k] + grads[1][k] + grads[2][k], atol=1e-12)

    def test_total_loss_finite_difference(self, tiny_data):
        with precision("64"):
            cfg = tiny_config()
            model = make(cfg, tiny_data)
            model.cast(np.float64)
            col = model.collate(first_batch(tiny_data, cfg).users)
            params = list(model.parameters())
            report = grad_check(lambda: total_loss(model, col, (1, 1, 1)).total, params, max_entries=6, floor=1e-5)
            assert report.passed(1e-4), report.max_error


class TestTrainStep:
    def test_zero_lr_leaves_parameters(self, tiny_data):
        cfg = tiny_config(**{"trainer.lr": 0.0})
        model = make(cfg, tiny_data)
        before = {k: p.data.copy() for k, p in model.parameter_dict().items()}
        opt = Adam.from_config(model.parameter_dict(), cfg.trainer)
        train_step(model, first_batch(tiny_data, cfg), opt, cfg.trainer)
        for k, p in model.parameter_dict().items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_deterministic(self, tiny_data):
        cfg = tiny_config()
        out = []
        for _ in range(2):
            model = make(cfg, tiny_data)
            opt = Adam.from_config(model.parameter_dict(), cfg.trainer)
            values = train_step(model, first_batch(tiny_data, cfg), opt, cfg.trainer)
            out.append((values, {k: p.data.copy() for k, p in model.parameter_dict().items()}))
        assert out[0][0] == out[1][0]
        for k in out[0][1]:
            np.testing.assert_array_equal(out[0][1][k], out[1][1][k])

    def test_clipping_bounds_the_update(self, tiny_data):
        cfg = tiny_config(**{"trainer.clip_norm": 1e-6})
        model = make(cfg, tiny_data)
        opt = Adam.from_config(model.parameter_dict(), cfg.trainer)
        values = train_step(model, first_batch(tiny_data, cfg), opt, cfg.trainer)
        assert values["grad_norm"] > 1e-6  # reported before clipping

    def test_non_finite_loss_aborts_with_dump(self, tiny_data, tmp_path):
        cfg = tiny_config()
        model = make(cfg, tiny_data)
        model.item_embedding.data[:] = np.nan
        opt = Adam.from_config(model.parameter_dict(), cfg.trainer)
        batch = first_batch(tiny_data, cfg)
        with pytest.raises(NonFiniteError, match="batch user ids"):
            train_step(model, batch, opt, cfg.trainer, step=7, dump_dir=tmp_path)
        dump = json.loads((tmp_path / "nonfinite_step7.json").read_text())
        assert dump["user_ids"] == [u.user_id for u in batch.users]


class TestAdam:
    def test_matches_reference_update(self):
        from grank.numeric import Parameter

        p = Parameter(np.array([[1.0, -2.0]]), name="w")
        opt = Adam({"w": p}, lr=0.1)
        g = np.array([[0.5, -0.25]])
        m = v = np.zeros(2)
        x = np.array([1.0, -2.0])
        for t in range(1, 4):
            p.grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g[0]
            v = 0.999 * v + 0.001 * g[0] ** 2
            x = x - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data[0], x, rtol=1e-6)


class TestLoop:
    def test_epochs_zero_checkpoint_is_init(self, tiny_data, tmp_path):
        cfg = tiny_config(**{"trainer.epochs": 0})
        result = train_loop(tiny_data[0], cfg, run_dir=tmp_path)
        fresh = make(cfg, tiny_data, seed=cfg.trainer.seed)
        ckpt = read_checkpoint(tmp_path / "init.grnk")
        assert ckpt.step == 0
        for k, p in fresh.parameter_dict().items():
            np.testing.assert_array_equal(ckpt.params[k], p.data)
        assert result.step == 0

    def test_log_lines_and_checkpoints(self, tiny_data, tmp_path):
        cfg = tiny_config(**{"trainer.epochs": 2, "trainer.log_interval": 2})
        result = train_loop(tiny_data[0], cfg, run_dir=tmp_path)
        steps = 2 * (len(tiny_data[0]) // cfg.trainer.batch_size)
        assert result.step == steps
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == steps // cfg.trainer.log_interval
        entry = json.loads(lines[0])
        assert {"step", "total", "ntp", "sa", "ca", "ms"} <= set(entry)
        assert (tmp_path / "epoch1.grnk").exists() and (tmp_path / "epoch2.grnk").exists()

    def test_identical_seeds_identical_checkpoints(self, tiny_data, tmp_path):
        cfg = tiny_config()
        train_loop(tiny_data[0], cfg, run_dir=tmp_path / "a")
        train_loop(tiny_data[0], cfg, run_dir=tmp_path / "b")
        assert (tmp_path / "a" / "last.grnk").read_bytes() == (tmp_path / "b" / "last.grnk").read_bytes()

    def test_resume_matches_uninterrupted(self, tiny_data, tmp_path):
        cfg = tiny_config(**{"trainer.epochs": 2})
        full = train_loop(tiny_data[0], cfg, run_dir=tmp_path / "full")
        first = train_loop(tiny_data[0], tiny_config(**{"trainer.epochs": 1}), run_dir=tmp_path / "part")
        resumed = train_loop(tiny_data[0], cfg, run_dir=tmp_path / "part", resume=first.last_checkpoint)
        per_epoch = len(tiny_data[0]) // cfg.trainer.batch_size
        assert resumed.history[0]["step"] == per_epoch + 1
        assert resumed.history[0]["total"] == full.history[per_epoch]["total"]
        for k, p in full.model.parameter_dict().items():
            np.testing.assert_array_equal(resumed.model.parameter_dict()[k].data, p.data)

    def test_resume_mid_epoch(self, tiny_data, tmp_path):
        cfg = tiny_config(**{"trainer.epochs": 1})
        full = train_loop(tiny_data[0], cfg)
        part = train_loop(tiny_data[0], tiny_config(**{"trainer.max_steps": 2}), run_dir=tmp_path)
        resumed = train_loop(tiny_data[0], cfg, resume=part.last_checkpoint)
        assert resumed.history[0]["total"] == full.history[2]["total"]


class TestCheckpoint:
    def test_roundtrip_bitwise_forward(self, tiny_data, tmp_path):
        cfg = tiny_config()
        model = make(cfg, tiny_data, seed=4)
        path = save_checkpoint(tmp_path / "m.grnk", model, step=3)
        again, ckpt = load_model(path)
        assert ckpt.step == 3
        users = tiny_data[1].users[:5]
        np.testing.assert_array_equal(model.user_vectors(users), again.user_vectors(users))
        np.testing.assert_array_equal(model.item_vectors(), again.item_vectors())

    def test_format_header(self, tiny_data, tmp_path):
        model = make(tiny_config(), tiny_data)
        path = save_checkpoint(tmp_path / "m.grnk", model)
        raw = path.read_bytes()
        assert raw[:4] == b"GRNK"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert (tmp_path / "m.grnk.cfg").exists()

    def test_64_bit_roundtrip(self, tiny_data, tmp_path):
        with precision("64"):
            model = make(tiny_config(), tiny_data)
            model.cast(np.float64)
            path = save_checkpoint(tmp_path / "m.grnk", model)
            again, _ = load_model(path)
            users = tiny_data[1].users[:3]
            np.testing.assert_array_equal(model.user_vectors(users), again.user_vectors(users))

    def test_optimizer_state_roundtrip(self, tiny_data, tmp_path):
        cfg = tiny_config()
        model = make(cfg, tiny_data)
        opt = Adam.from_config(model.parameter_dict(), cfg.trainer)
        train_step(model, first_batch(tiny_data, cfg), opt, cfg.trainer)
        path = save_checkpoint(tmp_path / "m.grnk", model, 1, opt)
        ckpt = read_checkpoint(path)
        again = Adam.from_config(model.parameter_dict(), cfg.trainer)
        again.load_state_dict(ckpt.optimizer)
        assert again.t == 1
        for k in opt.m:
            np.testing.assert_array_equal(again.m[k], opt.m[k])

    def test_corrupt_and_mismatched(self, tiny_data, tmp_path):
        model = make(tiny_config(), tiny_data)
        path = save_checkpoint(tmp_path / "m.grnk", model)
        bad = tmp_path / "bad.grnk"
        bad.write_bytes(path.read_bytes()[:-5])
        (tmp_path / "bad.grnk.cfg").write_text((tmp_path / "m.grnk.cfg").read_text())
        with pytest.raises(ParseError):
            read_checkpoint(bad)
        with pytest.raises(ConfigError):
            load_model(path, overrides={"generator.d_top": 4})

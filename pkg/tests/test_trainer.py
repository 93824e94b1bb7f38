import json
import math

import numpy as np
import pytest

from moembed import numeric as nm
from moembed.datapipe import PairRecord
from moembed.encoder import EncoderConfig, EncoderModel, Vocabulary, init_model
from moembed.moe import ConfigError
from moembed.trainer import (
    AdamW,
    LanguageSampler,
    TrainConfig,
    clip_grad_norm,
    lr_at,
    run_stage,
)
from moembed.upcycle import upcycle


def tiny_data(n_per=16, datasets=2, negatives=0):
    recs = []
    for d in range(datasets):
        for i in range(n_per):
            negs = [f"ds{d} noise{(i + j) % n_per} word{j}" for j in range(negatives)] or None
            recs.append(PairRecord(f"ds{d} alpha{i} beta{i % 3}", f"ds{d} gamma{i} delta{i % 5}", f"ds{d}", hard_negatives=negs))
    return recs


def tiny_model(data, moe=True, seed=0):
    texts = [t for r in data for t in (r.query, r.document, *(r.hard_negatives or ()))]
    vocab = Vocabulary.build(texts)
    cfg = EncoderConfig(vocab_size=len(vocab), hidden_dim=8, num_layers=2, num_heads=2, mlp_dim=16, max_seq_len=12,
                        output_dims=(8, 4))
    model = init_model(cfg, seed, vocab)
    return upcycle(model, [1], 4, 2, seed=seed, router_noise=0.1) if moe else model


def small_cfg(**kw):
    base = dict(batch_size=8, total_steps=6, epochs=None, warmup_steps=2, peak_lr=1e-2, max_len_query=12, max_len_doc=12)
    base.update(kw)
    return TrainConfig.pretrain(**base)


class TestSchedule:
    def test_endpoints_and_warmup(self):
        cfg = TrainConfig(peak_lr=1.0, warmup_steps=10, total_steps=110, epochs=None)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(5, cfg) == 0.5
        assert lr_at(10, cfg) == 1.0
        assert lr_at(110, cfg) == 0.0
        assert lr_at(500, cfg) == 0.0

    def test_cosine_midpoint(self):
        cfg = TrainConfig(peak_lr=2.0, warmup_steps=0, total_steps=100, epochs=None, schedule="cosine")
        assert lr_at(50, cfg) == pytest.approx(1.0, abs=1e-12)
        assert lr_at(25, cfg) == pytest.approx(1.0 + math.cos(math.pi / 4), abs=1e-12)

    def test_linear_decay(self):
        cfg = TrainConfig(peak_lr=1.0, warmup_steps=10, total_steps=20, epochs=None, schedule="linear")
        assert lr_at(15, cfg) == pytest.approx(0.5, abs=1e-12)

    def test_warmup_longer_than_run(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_steps=10, total_steps=5, epochs=None)

    def test_presets(self):
        assert TrainConfig.mlm().peak_lr == 4e-4 and TrainConfig.mlm().schedule == "linear"
        pre = TrainConfig.pretrain()
        assert (pre.batch_size, pre.tau, pre.alpha, pre.schedule) == (16384, 0.02, 1.0, "cosine")
        fin = TrainConfig.finetune()
        assert (fin.num_hard_negatives, fin.mrl_dims, fin.warmup_steps) == (10, (768, 256), 400)

    def test_json_round_trip_rejects_unknown(self):
        cfg = TrainConfig.finetune(seed=4)
        assert TrainConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_json({**cfg.to_json(), "bogus": 1})


class TestOptimizer:
    def test_zero_lr_is_a_no_op(self):
        p = nm.parameter(np.ones((2, 2)))
        p.grad = np.full((2, 2), 3.0)
        opt = AdamW({"p": p})
        opt.step({"p": p}, 0.0)
        np.testing.assert_array_equal(p.data, np.ones((2, 2)))

    def test_first_step_moves_by_lr_in_sign_direction(self):
        p = nm.parameter(np.array([1.0, -1.0]))
        p.grad = np.array([0.5, -2.0])
        AdamW({"p": p}, weight_decay=0.0).step({"p": p}, 0.1)
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)

    def test_decay_only_on_matrices(self):
        w = nm.parameter(np.ones((2, 2)))
        b = nm.parameter(np.ones(2))
        w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
        AdamW({"w": w, "b": b}, weight_decay=0.5).step({"w": w, "b": b}, 0.1)
        np.testing.assert_allclose(w.data, 0.95)
        np.testing.assert_array_equal(b.data, 1.0)

    def test_clip(self):
        a, b = nm.parameter([0.0, 0.0]), nm.parameter([0.0])
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        total = math.sqrt(float((a.grad**2).sum() + (b.grad**2).sum()))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_no_clip_below_threshold(self):
        a = nm.parameter([0.0])
        a.grad = np.array([0.5])
        clip_grad_norm([a], 1.0)
        assert a.grad[0] == 0.5


class TestRuns:
    def test_deterministic_trace(self):
        data = tiny_data()
        a = run_stage(small_cfg(), data, tiny_model(data)).history
        b = run_stage(small_cfg(), data, tiny_model(data)).history
        assert a == b and len(a) == 6
        assert all(np.isfinite(a))

    def test_resume_matches_uninterrupted(self, tmp_path):
        data = tiny_data()
        full = run_stage(small_cfg(), data, tiny_model(data))
        run_stage(small_cfg(), data, tiny_model(data), out_dir=tmp_path, stop_at=3)
        resumed = run_stage(small_cfg(), data, tmp_path / "checkpoint.bin")
        assert resumed.history == full.history
        for n, p in full.model.params.items():
            assert np.array_equal(p.data, resumed.model.params[n].data)

    def test_accumulation_matches_large_batch(self):
        data = tiny_data()
        big = run_stage(small_cfg(batch_size=8), data, tiny_model(data)).history
        acc = run_stage(small_cfg(batch_size=2, grad_accum_steps=4), data, tiny_model(data)).history
        np.testing.assert_allclose(acc, big, rtol=0, atol=1e-10)

    def test_accumulation_with_hard_negatives_and_mrl(self):
        data = tiny_data(negatives=2)
        kw = dict(stage="contrastive_finetune", num_hard_negatives=2, mrl_dims=(8, 4), total_steps=4)
        big = run_stage(small_cfg(batch_size=8, **kw), data, tiny_model(data)).history
        acc = run_stage(small_cfg(batch_size=4, grad_accum_steps=2, **kw), data, tiny_model(data)).history
        np.testing.assert_allclose(acc, big, rtol=0, atol=1e-10)

    def test_finetune_requires_negatives(self):
        data = tiny_data(negatives=1)
        with pytest.raises(ConfigError, match="hard negatives"):
            run_stage(small_cfg(stage="contrastive_finetune", num_hard_negatives=2), data, tiny_model(data))

    def test_outputs_written(self, tmp_path):
        data = tiny_data()
        run_stage(small_cfg(total_steps=3), data, tiny_model(data), out_dir=tmp_path, log_routing=True)
        rows = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in rows] == [0, 1, 2]
        routing = [json.loads(x) for x in (tmp_path / "routing.jsonl").read_text().splitlines()]
        assert len(routing) == 3 and sum(routing[0]["r"]) == pytest.approx(1.0)
        assert EncoderModel.load(tmp_path / "checkpoint.bin").moe_layers() == [1]

    def test_loss_decreases_on_tiny_task(self):
        data = tiny_data()
        hist = run_stage(small_cfg(total_steps=40, warmup_steps=4), data, tiny_model(data, moe=False)).history
        assert np.mean(hist[-5:]) < np.mean(hist[:5])


class TestMLM:
    def texts(self):
        return [(f"alpha beta gamma{i} delta", "en") for i in range(12)] + [(f"uno dos tres{i}", "es") for i in range(6)]

    def model(self, seed=0):
        vocab = Vocabulary.build([t for t, _ in self.texts()])
        cfg = EncoderConfig(vocab_size=len(vocab), hidden_dim=8, num_layers=2, num_heads=2, mlp_dim=16, max_seq_len=12)
        return upcycle(init_model(cfg, seed, vocab), [1], 2, 1, router_noise=0.1)

    def test_accumulation_matches_large_batch(self):
        kw = dict(total_steps=3, warmup_steps=1, max_len=12, peak_lr=1e-2)
        big = run_stage(TrainConfig.mlm(batch_size=6, grad_accum_steps=1, **kw), self.texts(), self.model()).history
        acc = run_stage(TrainConfig.mlm(batch_size=2, grad_accum_steps=3, **kw), self.texts(), self.model()).history
        np.testing.assert_allclose(acc, big, rtol=0, atol=1e-10)

    def test_language_draws_follow_weights(self):
        sampler = LanguageSampler({"en": ["a"] * 900, "sw": ["b"] * 100}, 1, seed=0, alpha=0.3)
        langs = [next(sampler).dataset for _ in range(4000)]
        assert abs(langs.count("en") / 4000 - 0.660) < 0.03

import json

import numpy as np
import pytest

from moembed.cli import main
from moembed.encoder import EncoderModel, embed_texts
from moembed.evaluation import RetrievalTask, ndcg_at_k, retrieve


def write_config(path, cfg):
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data")]) == 0
    return root


def small_config(root, **extra):
    cfg = {
        "encoder": {"hidden_dim": 16, "num_layers": 2, "num_heads": 2, "mlp_dim": 32, "max_seq_len": 16,
                    "output_dims": [16, 8]},
        "train": {"batch_size": 32, "peak_lr": 3e-3, "warmup_steps": 2, "total_steps": 6, "epochs": None,
                  "max_len_query": 16, "max_len_doc": 16, "max_len": 16},
        "data": {"pairs": "data/pairs.jsonl", "texts": "data/texts.jsonl", "task": "data/task"},
        "teacher": "bow",
    }
    for key, value in extra.items():
        cfg[key] = {**cfg.get(key, {}), **value} if isinstance(value, dict) else value
    return write_config(root / "run.json", cfg)


def test_full_pipeline(workspace, capsys):
    root = workspace
    cfg = small_config(root)
    assert main(["mlm", "--config", str(cfg), "--out", str(root / "mlm"), "--steps", "3"]) == 0
    assert main(["upcycle", "--init", str(root / "mlm/checkpoint.bin"), "--layers", "alternate-from-second",
                 "--experts", "4", "--topk", "2", "--out", str(root / "up")]) == 0
    assert EncoderModel.load(root / "up/checkpoint.bin").moe_layers() == [1]
    assert main(["pretrain", "--config", str(cfg), "--init", str(root / "up/checkpoint.bin"),
                 "--out", str(root / "pre"), "--steps", "30", "--log-routing"]) == 0
    assert (root / "pre/routing.jsonl").stat().st_size > 0

    # a 30-step model is too collapsed for a 0.95 margin to admit anything, so mine plain top-k here
    mine_cfg = small_config(root, mining={"num_negatives": 3})
    assert main(["mine", "--config", str(mine_cfg), "--teacher", str(root / "pre/checkpoint.bin"),
                 "--margin", "none", "--out", str(root / "mined")]) == 0
    mined = [json.loads(x) for x in (root / "mined/mined.jsonl").read_text().splitlines()]
    assert all(r["document"] not in r["hard_negatives"] for r in mined)

    ft_cfg = small_config(root, data={"pairs": "mined/mined.jsonl"},
                          train={"num_hard_negatives": 1, "mrl_dims": [16, 8], "batch_size": 16})
    assert all(len(r["hard_negatives"]) == 3 for r in mined)
    assert main(["finetune", "--config", str(ft_cfg), "--init", str(root / "pre/checkpoint.bin"),
                 "--out", str(root / "ft"), "--steps", "5"]) == 0

    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--init", str(root / "ft/checkpoint.bin"), "--out", str(root / "ev")]) == 0
    printed = capsys.readouterr().out.strip().splitlines()[-1]
    name, value = printed.split("\t")
    model = EncoderModel.load(root / "ft/checkpoint.bin")
    task = RetrievalTask.load(root / "data/task")
    assert name == "ndcg@10"
    assert float(value) == pytest.approx(ndcg_at_k(retrieve(model, task), task.qrels), abs=1e-6)

    untrained = EncoderModel.load(root / "up/checkpoint.bin")
    assert float(value) > ndcg_at_k(retrieve(untrained, task), task.qrels)


def test_embed_writes_vectors(workspace):
    root = workspace
    cfg = small_config(root)
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "emb_model"), "--steps", "2"]) == 0
    inp = root / "texts_in.jsonl"
    inp.write_text(json.dumps({"id": "a", "text": "ds0h1 ds0m2"}) + "\n" + json.dumps({"id": "b", "text": "ds1f3"}) + "\n")
    assert main(["embed", "--config", str(cfg), "--init", str(root / "emb_model/checkpoint.bin"), "--input", str(inp),
                 "--role", "query", "--dim", "8", "--out", str(root / "emb")]) == 0
    rows = [json.loads(x) for x in (root / "emb/embeddings.jsonl").read_text().splitlines()]
    assert [r["id"] for r in rows] == ["a", "b"]
    assert all(len(r["vector"]) == 8 for r in rows)
    model = EncoderModel.load(root / "emb_model/checkpoint.bin")
    direct = embed_texts(model, ["ds0h1 ds0m2", "ds1f3"], "query", None, 8)
    np.testing.assert_allclose([r["vector"] for r in rows], direct, atol=1e-12)


def test_filter_command(workspace):
    root = workspace
    cfg = small_config(root, filter={"top_k": 2, "shard_size": 500})
    assert main(["filter", "--config", str(cfg), "--out", str(root / "filt")]) == 0
    report = json.loads((root / "filt/filter_report.json").read_text())
    kept = (root / "filt/filtered.jsonl").read_text().splitlines()
    assert report["retained_count"] == len(kept) <= report["input_count"]


def test_rerun_is_identical(workspace):
    root = workspace
    cfg = small_config(root)
    for out in ("r1", "r2"):
        assert main(["pretrain", "--config", str(cfg), "--seed", "7", "--out", str(root / out), "--steps", "3"]) == 0
    assert (root / "r1/checkpoint.bin").read_bytes() == (root / "r2/checkpoint.bin").read_bytes()
    assert (root / "r1/metrics.jsonl").read_text() == (root / "r2/metrics.jsonl").read_text()


class TestErrors:
    def test_unknown_key_points_at_it(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"train": {"peak_lr": 1e-3, "lr_peak": 2}})
        assert main(["pretrain", "--config", str(cfg)]) == 1
        assert "config.train.lr_peak" in capsys.readouterr().err

    def test_unknown_top_level_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"trian": {}})
        assert main(["pretrain", "--config", str(cfg)]) == 1
        assert "config.trian" in capsys.readouterr().err

    def test_missing_data_path(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"data": {"pairs": "nope.jsonl"}})
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "config.data.pairs" in capsys.readouterr().err

    def test_invalid_train_value(self, workspace, capsys):
        cfg = small_config(workspace, train={"warmup_steps": 100, "total_steps": 5})
        assert main(["pretrain", "--config", str(cfg), "--out", str(workspace / "bad")]) == 1
        assert "warmup" in capsys.readouterr().err

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        assert main(["eval", "--config", str(path)]) == 1

    def test_runtime_failure_exit_code(self, workspace, tmp_path):
        broken = tmp_path / "broken.bin"
        broken.write_bytes(b"MOEMBED1garbage")
        assert main(["eval", "--init", str(broken), "--task", str(workspace / "data/task"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_bad_upcycle_request(self, workspace, capsys):
        cfg = small_config(workspace)
        assert main(["pretrain", "--config", str(cfg), "--out", str(workspace / "d2"), "--steps", "1"]) == 0
        assert main(["upcycle", "--init", str(workspace / "d2/checkpoint.bin"), "--experts", "2", "--topk", "3",
                     "--out", str(workspace / "u2")]) == 1


def test_paths_relative_to_config(tmp_path, workspace):
    sub = tmp_path / "nested"
    sub.mkdir()
    cfg = {"data": {"task": str(workspace / "data/task")}, "init": "../model.bin"}
    write_config(sub / "c.json", cfg)
    from moembed.cli import RunConfig

    loaded = RunConfig.load(sub / "c.json")
    assert loaded.get("init") == str((tmp_path / "model.bin").resolve())


def test_balance_ablation_writes_figure(tmp_path, capsys):
    assert main(["ablate", "--kind", "balance", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "balance.json").read_text())
    assert report["decreased"]
    assert (tmp_path / "balance.png").read_bytes()[:4] == b"\x89PNG"

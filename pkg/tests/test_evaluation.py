import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moembed.encoder import EncoderConfig, InputError, Vocabulary, init_model
from moembed.evaluation import (
    RetrievalTask,
    compare_runs,
    ndcg_at_k,
    ndcg_per_query,
    retrieve,
    retrieve_embeddings,
    write_run,
)
from moembed.moe import ConfigError


def direct_ndcg(ranked_docs, rels, k):
    """Textbook formula, written out independently of the library."""
    got = 0.0
    for i, doc in enumerate(ranked_docs[:k]):
        got += (2 ** rels.get(doc, 0) - 1) / math.log(i + 2, 2)
    ideal_gains = sorted(rels.values(), reverse=True)[:k]
    ideal = sum((2**g - 1) / math.log(i + 2, 2) for i, g in enumerate(ideal_gains))
    return got / ideal


def as_run(qid, docs):
    return {qid: [(d, float(len(docs) - i)) for i, d in enumerate(docs)]}


class TestNDCG:
    def test_perfect_ranking(self):
        assert ndcg_at_k(as_run("q", ["a", "b", "c"]), {"q": {"a": 1}}) == 1.0

    def test_relevant_at_rank_two(self):
        got = ndcg_at_k(as_run("q", ["x", "a", "y"]), {"q": {"a": 1}})
        assert got == pytest.approx(1 / math.log2(3), abs=1e-12)

    def test_relevant_outside_cutoff(self):
        docs = [f"x{i}" for i in range(10)] + ["a"]
        assert ndcg_at_k(as_run("q", docs), {"q": {"a": 1}}, k=10) == 0.0

    def test_graded_gains(self):
        rels = {"a": 3, "b": 1}
        got = ndcg_at_k(as_run("q", ["b", "a"]), {"q": rels})
        assert got == pytest.approx(direct_ndcg(["b", "a"], rels, 10), abs=1e-12)

    def test_queries_without_relevant_docs_excluded(self):
        run = {**as_run("q1", ["a"]), **as_run("q2", ["b"])}
        assert ndcg_per_query(run, {"q1": {"a": 1}, "q2": {"b": 0}}) == {"q1": 1.0}

    def test_all_queries_empty_raises(self):
        with pytest.raises(ValueError):
            ndcg_at_k(as_run("q", ["a"]), {"q": {}})

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            ndcg_at_k(as_run("q", ["a"]), {"q": {"a": 1}}, k=0)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 100_000), k=st.integers(1, 12))
    def test_matches_direct_formula_and_bounds(self, seed, k):
        rng = np.random.default_rng(seed)
        docs = [f"d{i}" for i in range(15)]
        order = list(rng.permutation(docs))
        rels = {d: int(rng.integers(0, 4)) for d in rng.choice(docs, size=5, replace=False)}
        if max(rels.values()) == 0:
            rels[docs[0]] = 1
        got = ndcg_at_k(as_run("q", order), {"q": rels}, k)
        assert got == pytest.approx(direct_ndcg(order, rels, k), abs=1e-12)
        assert 0.0 <= got <= 1.0 + 1e-12

    def test_invariant_under_monotone_score_transform(self):
        rng = np.random.default_rng(0)
        q, d = rng.normal(size=(6, 4)), rng.normal(size=(20, 4))
        qids, dids = [f"q{i}" for i in range(6)], [f"d{j}" for j in range(20)]
        qrels = {qid: {dids[j]: 1 for j in rng.choice(20, 3, replace=False)} for qid in qids}
        base = retrieve_embeddings(qids, q, dids, d, 10)
        squashed = {qid: [(doc, math.tanh(s) * 7 + 1) for doc, s in ranked] for qid, ranked in base.items()}
        assert ndcg_at_k(base, qrels) == ndcg_at_k(squashed, qrels)


class TestRetrieval:
    @pytest.mark.parametrize("seed", range(4))
    def test_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        q, d = rng.normal(size=(5, 3)), rng.normal(size=(30, 3))
        qids, dids = [f"q{i}" for i in range(5)], [f"d{j:02d}" for j in range(30)]
        run = retrieve_embeddings(qids, q, dids, d, 10)
        for i, qid in enumerate(qids):
            scores = [float(q[i] @ d[j]) for j in range(30)]
            expected = sorted(range(30), key=lambda j: (-scores[j], dids[j]))[:10]
            assert [doc for doc, _ in run[qid]] == [dids[j] for j in expected]

    def test_ties_broken_by_doc_id(self):
        d = np.array([[1.0, 0.0]] * 4)
        run = retrieve_embeddings(["q"], np.array([[1.0, 0.0]]), ["c", "a", "d", "b"], d, 3)
        assert [doc for doc, _ in run["q"]] == ["a", "b", "c"]

    def test_k_larger_than_corpus(self):
        run = retrieve_embeddings(["q"], np.ones((1, 2)), ["a", "b"], np.eye(2), 10)
        assert len(run["q"]) == 2

    def test_empty_corpus(self):
        with pytest.raises(InputError):
            retrieve_embeddings(["q"], np.ones((1, 2)), [], np.zeros((0, 2)), 10)

    def test_model_retrieval_and_task_files(self, tmp_path):
        texts = {"d0": "red apple pie", "d1": "blue sky today", "d2": "green apple tart"}
        task = RetrievalTask({"q0": "apple pie"}, texts, {"q0": {"d0": 1}})
        task.save(tmp_path)
        loaded = RetrievalTask.load(tmp_path)
        assert loaded == task
        vocab = Vocabulary.build(list(texts.values()) + ["apple pie"])
        cfg = EncoderConfig(vocab_size=len(vocab), hidden_dim=8, num_layers=1, num_heads=2, mlp_dim=8,
                            max_seq_len=8, output_dims=(8, 4))
        model = init_model(cfg, 0, vocab)
        run = retrieve(model, loaded, dim=4, k=2)
        assert len(run["q0"]) == 2
        with pytest.raises(ConfigError):
            retrieve(model, loaded, dim=3)
        path = tmp_path / "run.jsonl"
        write_run(path, run)
        rows = [json.loads(x) for x in path.read_text().splitlines()]
        assert [r["rank"] for r in rows] == [1, 2]

    def test_qrels_must_reference_corpus(self):
        with pytest.raises(InputError):
            RetrievalTask({"q": "x"}, {"a": "y"}, {"q": {"zzz": 1}})


class TestCompare:
    def test_best_and_ties(self):
        out = compare_runs({"dense": 0.5, "moe": {"score": 0.6, "batch_size": 64}, "big": 0.6})
        assert out["best"] == "moe"
        assert out["ties"] == [["moe", "big"]]
        assert "tie: moe = big" in out["text"]
        json.dumps(out)

    def test_table_lists_every_run(self):
        out = compare_runs({"a": 0.1, "b": 0.2})
        lines = out["text"].splitlines()
        assert len(lines) == 4 and lines[2].startswith("a") and "0.2000" in lines[3]

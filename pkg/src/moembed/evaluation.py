"""Brute-force dense retrieval and nDCG@k."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoder import InputError, embed_texts
from .moe import ConfigError

RetrievalRun = dict[str, list[tuple[str, float]]]
Qrels = Mapping[str, Mapping[str, float]]


@dataclass
class RetrievalTask:
    queries: dict[str, str]
    corpus: dict[str, str]
    qrels: dict[str, dict[str, float]]

    def __post_init__(self):
        for qid, rels in self.qrels.items():
            missing = [d for d in rels if d not in self.corpus]
            if missing:
                raise InputError(f"qrels for {qid!r} reference unknown documents {missing[:3]}")

    @classmethod
    def load(cls, directory) -> "RetrievalTask":
        """Read ``queries.jsonl``, ``corpus.jsonl`` and ``qrels.jsonl`` from a directory."""
        directory = Path(directory)
        queries = {r["_id"]: r["text"] for r in _read_jsonl(directory / "queries.jsonl")}
        corpus = {r["_id"]: r["text"] for r in _read_jsonl(directory / "corpus.jsonl")}
        qrels: dict[str, dict[str, float]] = {}
        for r in _read_jsonl(directory / "qrels.jsonl"):
            qrels.setdefault(r["query_id"], {})[r["doc_id"]] = float(r.get("score", 1))
        return cls(queries, corpus, qrels)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _write_jsonl(directory / "queries.jsonl", ({"_id": k, "text": v} for k, v in self.queries.items()))
        _write_jsonl(directory / "corpus.jsonl", ({"_id": k, "text": v} for k, v in self.corpus.items()))
        _write_jsonl(
            directory / "qrels.jsonl",
            ({"query_id": q, "doc_id": d, "score": s} for q, rels in self.qrels.items() for d, s in rels.items()),
        )


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def rank_scores(scores: np.ndarray, doc_ids: Sequence[str], k: int) -> list[tuple[str, float]]:
    """Top ``k`` of one query's scores; ties go to the smaller doc id."""
    order = sorted(range(len(doc_ids)), key=lambda j: (-scores[j], doc_ids[j]))
    return [(doc_ids[j], float(scores[j])) for j in order[:k]]


def retrieve_embeddings(
    query_ids: Sequence[str], q: np.ndarray, doc_ids: Sequence[str], d: np.ndarray, k: int
) -> RetrievalRun:
    if len(doc_ids) == 0:
        raise InputError("cannot retrieve from an empty corpus")
    scores = q @ d.T
    run = {}
    for i, qid in enumerate(query_ids):
        row = scores[i]
        if k < len(doc_ids):
            # candidates down to the k-th score, with every tie kept for the id tie-break
            kth = np.partition(-row, k - 1)[k - 1]
            cand = np.flatnonzero(-row <= kth)
        else:
            cand = np.arange(len(doc_ids))
        ranked = rank_scores(row[cand], [doc_ids[j] for j in cand], k)
        run[qid] = ranked
    return run


def retrieve(model, task: RetrievalTask, dim: int | None = None, k: int = 10, max_len: int | None = None) -> RetrievalRun:
    """Embed queries and corpus with role prefixes and rank by cosine."""
    if not task.corpus:
        raise InputError("cannot retrieve from an empty corpus")
    if dim is not None and dim not in model.config.output_dims:
        raise ConfigError(f"dim={dim} not in configured output_dims {list(model.config.output_dims)}")
    if dim == model.config.hidden_dim:
        dim = None
    qids, dids = list(task.queries), list(task.corpus)
    q = embed_texts(model, [task.queries[i] for i in qids], "query", max_len, dim)
    d = embed_texts(model, [task.corpus[i] for i in dids], "document", max_len, dim)
    return retrieve_embeddings(qids, q, dids, d, k)


def dcg(gains: Sequence[float]) -> float:
    return sum((2.0**g - 1.0) / math.log2(r + 2) for r, g in enumerate(gains))


def ndcg_per_query(run: RetrievalRun, qrels: Qrels, k: int = 10) -> dict[str, float]:
    if k < 1:
        raise ConfigError("k must be >= 1")
    out = {}
    for qid, rels in qrels.items():
        positive = sorted((g for g in rels.values() if g > 0), reverse=True)
        if not positive:
            continue
        ranked = run.get(qid, [])[:k]
        actual = dcg([rels.get(doc, 0.0) for doc, _ in ranked])
        out[qid] = actual / dcg(positive[:k])
    return out


def ndcg_at_k(run: RetrievalRun, qrels: Qrels, k: int = 10) -> float:
    """Mean nDCG@k over queries that have at least one relevant document."""
    per_query = ndcg_per_query(run, qrels, k)
    if not per_query:
        raise ValueError("nDCG undefined: no query has a relevant document")
    return float(np.mean(list(per_query.values())))


def write_run(path, run: RetrievalRun) -> None:
    _write_jsonl(
        path,
        ({"query_id": q, "doc_id": d, "rank": r + 1, "score": s} for q, ranked in run.items() for r, (d, s) in enumerate(ranked)),
    )


def compare_runs(runs: Mapping[str, Mapping], metric: str = "ndcg@10") -> dict:
    """Tabulate scores keyed by run name.

    Each value is either a float or a mapping with ``score`` and optional
    ``model``, ``batch_size``, ``dim`` fields.  Returns a JSON-ready dict with
    a ``rows`` list, a ``best`` entry, any ``ties`` and a rendered ``text``.
    """
    rows = []
    for name, entry in runs.items():
        if not isinstance(entry, Mapping):
            entry = {"score": float(entry)}
        rows.append(
            {
                "name": name,
                "model": entry.get("model", name),
                "batch_size": entry.get("batch_size"),
                "dim": entry.get("dim"),
                "score": float(entry["score"]),
                "std": entry.get("std"),
            }
        )
    ties = []
    for i, a in enumerate(rows):
        for b in rows[i + 1 :]:
            if a["score"] == b["score"]:
                ties.append([a["name"], b["name"]])
    best = max(rows, key=lambda r: r["score"])["name"] if rows else None
    return {"metric": metric, "rows": rows, "best": best, "ties": ties, "text": render_table(rows, metric, ties)}


def render_table(rows: Sequence[Mapping], metric: str, ties: Sequence[Sequence[str]] = ()) -> str:
    header = ["run", "model", "batch", "dim", metric]
    body = [
        [
            r["name"],
            str(r["model"]),
            "-" if r["batch_size"] is None else str(r["batch_size"]),
            "-" if r["dim"] is None else str(r["dim"]),
            f"{r['score']:.4f}" + ("" if r.get("std") is None else f" ± {r['std']:.4f}"),
        ]
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    for a, b in ties:
        lines.append(f"tie: {a} = {b}")
    return "\n".join(lines)

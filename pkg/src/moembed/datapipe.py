"""Training-pair curation: consistency filtering, margin-aware negative mining,
single-dataset batch sampling and language sampling weights."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Protocol, Sequence

import numpy as np

from .moe import ConfigError

log = logging.getLogger(__name__)


@dataclass
class PairRecord:
    query: str
    document: str
    dataset: str = "default"
    language: str = "en"
    hard_negatives: list[str] | None = None

    def __post_init__(self):
        if not self.query.strip() or not self.document.strip():
            raise ValueError("query and document must be non-empty")

    def to_json(self) -> dict:
        d = asdict(self)
        if d["hard_negatives"] is None:
            del d["hard_negatives"]
        return d


@dataclass
class Shard:
    records: list[PairRecord]
    shard_size: int = 1000

    def __post_init__(self):
        if len(self.records) > self.shard_size:
            raise ValueError(f"shard holds {len(self.records)} records, limit {self.shard_size}")

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class MiningConfig:
    margin: float | None = 0.95
    num_negatives: int = 10
    candidate_pool: int | None = None

    def __post_init__(self):
        if self.margin is not None and not 0.0 < self.margin <= 1.0:
            raise ConfigError(f"margin must be in (0, 1], got {self.margin}")
        if self.num_negatives < 1:
            raise ConfigError("num_negatives must be positive")
        if self.candidate_pool is not None and self.candidate_pool < 1:
            raise ConfigError("candidate_pool must be positive")


@dataclass
class PairBatch:
    records: list[PairRecord]
    dataset: str

    def __len__(self) -> int:
        return len(self.records)


class Embedder(Protocol):
    def __call__(self, texts: Sequence[str], role: str) -> np.ndarray: ...


# -- io -------------------------------------------------------------------------------


def read_pairs(path) -> list[PairRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(PairRecord(**json.loads(line)))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_pairs(path, records: Iterable[PairRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def make_shards(records: Sequence[PairRecord], shard_size: int = 1000) -> list[Shard]:
    """Split per language, then into consecutive chunks of ``shard_size``."""
    by_lang: dict[str, list[PairRecord]] = {}
    for r in records:
        by_lang.setdefault(r.language, []).append(r)
    return [
        Shard(recs[i : i + shard_size], shard_size)
        for _, recs in sorted(by_lang.items())
        for i in range(0, len(recs), shard_size)
    ]


# -- embedders ------------------------------------------------------------------------


class BagOfWordsEmbedder:
    """Hashed bag-of-words teacher with idf weighting; needs no training."""

    def __init__(self, dim: int = 512, idf: Mapping[str, float] | None = None, seed: int = 0):
        self.dim = dim
        self.idf = dict(idf or {})
        self.seed = seed

    @classmethod
    def fit(cls, texts: Iterable[str], dim: int = 512, seed: int = 0) -> "BagOfWordsEmbedder":
        from .encoder import split_words

        df: Counter[str] = Counter()
        n = 0
        for t in texts:
            df.update(set(split_words(t)))
            n += 1
        idf = {w: float(np.log((1 + n) / (1 + c)) + 1.0) for w, c in df.items()}
        return cls(dim, idf, seed)

    def _bucket(self, word: str) -> tuple[int, float]:
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8, salt=self.seed.to_bytes(8, "little")).digest()
        h = int.from_bytes(digest, "little")
        return h % self.dim, 1.0 if (h >> 63) & 1 else -1.0

    def __call__(self, texts: Sequence[str], role: str = "document") -> np.ndarray:
        from .encoder import split_words

        out = np.zeros((len(texts), self.dim))
        cache: dict[str, tuple[int, float]] = {}
        for i, t in enumerate(texts):
            for w in split_words(t):
                if w not in cache:
                    cache[w] = self._bucket(w)
                j, sign = cache[w]
                out[i, j] += sign * self.idf.get(w, 1.0)
        norms = np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
        return out / norms


class ModelEmbedder:
    """Adapter exposing an :class:`EncoderModel` through the embedder interface."""

    def __init__(self, model, max_len: int | None = None, dim: int | None = None, batch_size: int = 256):
        self.model = model
        self.max_len = max_len
        self.dim = dim
        self.batch_size = batch_size

    def __call__(self, texts: Sequence[str], role: str) -> np.ndarray:
        from .encoder import embed_texts

        return embed_texts(self.model, list(texts), role, self.max_len, self.dim, self.batch_size)


# -- consistency filtering ------------------------------------------------------------


def own_document_rank(scores: np.ndarray) -> np.ndarray:
    """Rank (0-based) of document i among all documents for query i.

    Higher score ranks first; equal scores rank the lower index first.
    """
    diag = np.diag(scores)[:, None]
    idx = np.arange(scores.shape[0])
    beats = (scores > diag) | ((scores == diag) & (idx[None, :] < idx[:, None]))
    return beats.sum(axis=1)


def consistency_filter(shard: Shard | Sequence[PairRecord], embedder: Embedder, top_k: int = 2) -> list[PairRecord]:
    """Keep pairs whose document is among the ``top_k`` nearest documents of
    its own query within the shard."""
    records = list(shard.records if isinstance(shard, Shard) else shard)
    if top_k < 1:
        raise ConfigError("top_k must be >= 1")
    if not records:
        return []
    q = embedder([r.query for r in records], "query")
    d = embedder([r.document for r in records], "document")
    ranks = own_document_rank(q @ d.T)
    return [r for r, rank in zip(records, ranks) if rank < top_k]


def filter_shards(shards: Sequence[Shard], embedder: Embedder, top_k: int = 2) -> tuple[list[PairRecord], dict]:
    kept, per_shard = [], []
    for i, shard in enumerate(shards):
        out = consistency_filter(shard, embedder, top_k)
        kept.extend(out)
        per_shard.append({"shard": i, "input_count": len(shard), "retained_count": len(out)})
    report = {
        "input_count": sum(len(s) for s in shards),
        "retained_count": len(kept),
        "per_shard": per_shard,
    }
    return kept, report


# -- hard-negative mining -------------------------------------------------------------


@dataclass
class MiningResult:
    negatives: list[str]
    threshold: float
    positive_score: float
    underfull: bool = False
    scores: list[float] = field(default_factory=list)


def select_negatives(
    sims: np.ndarray,
    corpus: Sequence[str],
    positive: str,
    pos_sim: float,
    cfg: MiningConfig,
) -> MiningResult:
    """Walk candidates by descending similarity and accept those below the
    margin threshold, skipping copies of the positive."""
    threshold = pos_sim * cfg.margin if cfg.margin is not None else np.inf
    order = np.argsort(-sims, kind="stable")
    if cfg.candidate_pool is not None:
        order = order[: cfg.candidate_pool]
    chosen, chosen_scores = [], []
    for j in order:
        if corpus[j] == positive or not sims[j] < threshold:
            continue
        chosen.append(corpus[j])
        chosen_scores.append(float(sims[j]))
        if len(chosen) == cfg.num_negatives:
            break
    return MiningResult(chosen, float(threshold), float(pos_sim), len(chosen) < cfg.num_negatives, chosen_scores)


def mine_hard_negatives(
    query: str,
    positive: str,
    corpus: Sequence[str],
    teacher: Embedder,
    cfg: MiningConfig,
) -> MiningResult:
    q = teacher([query], "query")[0]
    pos = teacher([positive], "document")[0]
    docs = teacher(list(corpus), "document")
    return select_negatives(docs @ q, corpus, positive, float(pos @ q), cfg)


def mine_records(
    records: Sequence[PairRecord],
    corpus: Sequence[str],
    teacher: Embedder,
    cfg: MiningConfig,
) -> tuple[list[PairRecord], dict]:
    """Mine negatives for every record against a shared corpus (embedded once)."""
    corpus = list(corpus)
    docs = teacher(corpus, "document")
    q = teacher([r.query for r in records], "query")
    pos = teacher([r.document for r in records], "document")
    out, underfull = [], 0
    for i, r in enumerate(records):
        res = select_negatives(docs @ q[i], corpus, r.document, float(pos[i] @ q[i]), cfg)
        underfull += res.underfull
        out.append(PairRecord(r.query, r.document, r.dataset, r.language, res.negatives))
    if underfull:
        log.warning("%d of %d queries received fewer than %d negatives", underfull, len(records), cfg.num_negatives)
    report = {
        "input_count": len(records),
        "retained_count": len(out),
        "underfull_count": underfull,
        "margin": cfg.margin,
        "num_negatives": cfg.num_negatives,
    }
    return out, report


# -- batching -------------------------------------------------------------------------


class BatchSampler:
    """Single-dataset batches, shuffled per epoch; short remainders are dropped.

    Position is ``(epoch, cursor)`` so a run can resume mid-epoch.
    """

    def __init__(self, datasets: Mapping[str, Sequence[PairRecord]], batch_size: int, seed: int = 0):
        if not datasets or any(len(v) == 0 for v in datasets.values()):
            raise ConfigError("every dataset needs at least one record")
        largest = max(len(v) for v in datasets.values())
        if batch_size > largest:
            raise ConfigError(f"batch_size={batch_size} exceeds the largest dataset ({largest} records)")
        self.datasets = {k: list(v) for k, v in sorted(datasets.items())}
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self.cursor = 0
        self._plan: list[tuple[str, np.ndarray]] | None = None

    def epoch_plan(self, epoch: int) -> list[tuple[str, np.ndarray]]:
        rng = np.random.default_rng([self.seed, epoch])
        plan = []
        for tag, recs in self.datasets.items():
            perm = rng.permutation(len(recs))
            for start in range(0, len(recs) - self.batch_size + 1, self.batch_size):
                plan.append((tag, perm[start : start + self.batch_size]))
        order = rng.permutation(len(plan))
        return [plan[i] for i in order]

    def batches_per_epoch(self) -> int:
        return sum(len(v) // self.batch_size for v in self.datasets.values())

    def __iter__(self) -> Iterator[PairBatch]:
        return self

    def __next__(self) -> PairBatch:
        if self._plan is None:
            self._plan = self.epoch_plan(self.epoch)
        if self.cursor >= len(self._plan):
            self.epoch += 1
            self.cursor = 0
            self._plan = self.epoch_plan(self.epoch)
        tag, idx = self._plan[self.cursor]
        self.cursor += 1
        recs = self.datasets[tag]
        return PairBatch([recs[i] for i in idx], tag)

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor}

    def load_state_dict(self, state: Mapping) -> None:
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])
        self._plan = None


def sample_batches(
    datasets: Mapping[str, Sequence[PairRecord]], batch_size: int, seed: int = 0, epochs: int = 1
) -> Iterator[PairBatch]:
    sampler = BatchSampler(datasets, batch_size, seed)
    for _ in range(epochs * sampler.batches_per_epoch()):
        yield next(sampler)


def group_by_dataset(records: Iterable[PairRecord]) -> dict[str, list[PairRecord]]:
    out: dict[str, list[PairRecord]] = {}
    for r in records:
        out.setdefault(r.dataset, []).append(r)
    return out


def language_weights(counts: Mapping[str, float], alpha: float = 0.3) -> dict[str, float]:
    """Temperature-smoothed language sampling: ``p_l ~ (n_l / N) ** alpha``."""
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    if not counts or any(c <= 0 for c in counts.values()):
        raise ConfigError("language counts must be positive")
    total = float(sum(counts.values()))
    raw = {lang: (n / total) ** alpha for lang, n in counts.items()}
    z = sum(raw.values())
    return {lang: w / z for lang, w in raw.items()}


def load_language_counts(path) -> dict[str, float]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object mapping language to count")
    return {str(k): float(v) for k, v in data.items()}

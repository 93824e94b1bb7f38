"""Synthetic multi-dataset retrieval corpus with compositional topics.

Each dataset uses its own word forms.  A topic is addressed in queries by a
(head, modifier) word pair and described in documents by topic-specific
content words, so matching a query to its documents needs the pair jointly,
not either word alone.  With ``scrambled`` set, documents instead carry a
word pair from a separate vocabulary tied to the query pair by a random
bijection, so the model has to memorise a lookup table rather than learn an
additive match, which makes the task capacity-bound.  Several documents
share each topic, so unfiltered top-k mining picks up false negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datapipe import PairRecord
from .evaluation import RetrievalTask


@dataclass(frozen=True)
class SyntheticSpec:
    num_datasets: int = 4
    num_heads: int = 8
    num_modifiers: int = 8
    topics_per_dataset: int = 64
    pairs_per_topic: int = 20
    content_words_per_topic: int = 6
    doc_content_words: int = 4
    doc_filler_words: int = 4
    query_filler_words: int = 1
    filler_vocab: int = 40
    eval_queries_per_topic: int = 2
    eval_docs_per_topic: int = 3
    scrambled: bool = False
    seed: int = 0


@dataclass
class Topic:
    dataset: str
    index: int
    head: str
    modifier: str
    content: list[str]


class SyntheticCorpus:
    def __init__(self, spec: SyntheticSpec = SyntheticSpec()):
        if spec.topics_per_dataset > spec.num_heads * spec.num_modifiers:
            raise ValueError("more topics than (head, modifier) combinations")
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        self.topics: list[Topic] = []
        self.fillers: dict[str, list[str]] = {}
        for d in range(spec.num_datasets):
            tag = f"ds{d}"
            combos = rng.permutation(spec.num_heads * spec.num_modifiers)[: spec.topics_per_dataset]
            targets = rng.permutation(spec.num_heads * spec.num_modifiers)
            for t, c in enumerate(combos):
                h, m = divmod(int(c), spec.num_modifiers)
                if spec.scrambled:
                    a, b = divmod(int(targets[c]), spec.num_modifiers)
                    content = [f"{tag}a{a}", f"{tag}b{b}"]
                else:
                    content = [f"{tag}c{t}x{w}" for w in range(spec.content_words_per_topic)]
                self.topics.append(Topic(tag, t, f"{tag}h{h}", f"{tag}m{m}", content))
            self.fillers[tag] = [f"{tag}f{i}" for i in range(spec.filler_vocab)]

    @property
    def datasets(self) -> list[str]:
        return [f"ds{d}" for d in range(self.spec.num_datasets)]

    def query(self, topic: Topic, rng: np.random.Generator) -> str:
        words = [topic.head, topic.modifier] + list(rng.choice(self.fillers[topic.dataset], self.spec.query_filler_words))
        return " ".join(words[i] for i in rng.permutation(len(words)))

    def document(self, topic: Topic, rng: np.random.Generator) -> str:
        s = self.spec
        if s.scrambled:
            words = list(topic.content)
        else:
            words = list(rng.choice(topic.content, s.doc_content_words, replace=False))
        words += list(rng.choice(self.fillers[topic.dataset], s.doc_filler_words))
        return " ".join(words[i] for i in rng.permutation(len(words)))

    def training_pairs(self, split_seed: int = 1) -> list[PairRecord]:
        rng = np.random.default_rng([self.spec.seed, split_seed])
        out = []
        for topic in self.topics:
            for _ in range(self.spec.pairs_per_topic):
                out.append(PairRecord(self.query(topic, rng), self.document(topic, rng), topic.dataset, topic.dataset))
        return out

    def eval_task(self, split_seed: int = 2) -> RetrievalTask:
        s = self.spec
        rng = np.random.default_rng([s.seed, split_seed])
        queries, corpus, qrels = {}, {}, {}
        for ti, topic in enumerate(self.topics):
            doc_ids = []
            for k in range(s.eval_docs_per_topic):
                did = f"d{ti}_{k}"
                corpus[did] = self.document(topic, rng)
                doc_ids.append(did)
            for k in range(s.eval_queries_per_topic):
                qid = f"q{ti}_{k}"
                queries[qid] = self.query(topic, rng)
                qrels[qid] = {d: 1.0 for d in doc_ids}
        return RetrievalTask(queries, corpus, qrels)

    def all_texts(self) -> list[str]:
        words = [w for t in self.topics for w in [t.head, t.modifier, *t.content]]
        words += [w for f in self.fillers.values() for w in f]
        return words

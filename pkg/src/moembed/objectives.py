"""Contrastive, Matryoshka and masked-LM losses plus the combined objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numeric as nm
from .encoder import truncate_embedding
from .moe import ConfigError
from .numeric import DimensionError, Tensor

DEFAULT_TAU = 0.02


def score(queries: Tensor, documents: Tensor) -> Tensor:
    """Cosine scores of unit rows: ``[n, d] x [m, d] -> [n, m]``."""
    if queries.shape[-1] != documents.shape[-1]:
        raise DimensionError(f"embedding widths differ: {queries.shape} vs {documents.shape}")
    return queries @ documents.T


def hard_negative_scores(queries: Tensor, hard: Tensor) -> Tensor:
    """Row-aligned scores ``s(q_i, hn_{i,m})``: ``[n, d] x [n, H, d] -> [n, H]``."""
    if hard.shape[0] != queries.shape[0] or hard.shape[-1] != queries.shape[-1]:
        raise DimensionError(f"hard negatives {hard.shape} not aligned with queries {queries.shape}")
    n, d = queries.shape
    return (hard @ queries.reshape(n, d, 1)).reshape(n, hard.shape[1])


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def infonce(scores: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Query-to-document InfoNCE over a square in-batch score block."""
    _check_tau(tau)
    n = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] < n:
        raise DimensionError(f"expected [n, n + H] scores, got {scores.shape}")
    logp = nm.log_softmax(scores * (1.0 / tau), axis=-1)
    diag = np.arange(n)
    return -logp[diag, diag].mean()


def infonce_hard(scores: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """InfoNCE where columns ``n..n+H-1`` hold each row's own hard negatives.

    The normaliser for row i is the positive, the other in-batch documents and
    that row's H hard negatives; with H = 0 this is exactly :func:`infonce`.
    """
    return infonce(scores, tau)


def contrastive_scores(q: Tensor, d: Tensor, hard: Tensor | None = None) -> Tensor:
    s = score(q, d)
    if hard is None or hard.shape[1] == 0:
        return s
    return nm.concat([s, hard_negative_scores(q, hard)], axis=1)


def mrl_loss(
    query_emb: Tensor,
    doc_emb: Tensor,
    hard_emb: Tensor | None,
    dims: Sequence[int],
    tau: float = DEFAULT_TAU,
) -> Tensor:
    """Mean of hard-negative InfoNCE over truncated, renormalised embeddings.

    The full width is always one of the evaluated dimensions.
    """
    if not dims:
        raise ConfigError("mrl_loss needs at least one dimension")
    full = query_emb.shape[-1]
    dims = sorted(set(int(d) for d in dims) | {full}, reverse=True)
    losses = []
    for dim in dims:
        q = truncate_embedding(query_emb, dim)
        d = truncate_embedding(doc_emb, dim)
        h = truncate_embedding(hard_emb, dim) if hard_emb is not None else None
        losses.append(infonce_hard(contrastive_scores(q, d, h), tau))
    if len(losses) == 1:
        return losses[0]
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


@dataclass
class MaskedBatch:
    original: np.ndarray  # [batch, seq] int
    corrupted: np.ndarray
    mask_positions: np.ndarray  # bool
    mlm_probability: float

    @property
    def num_masked(self) -> int:
        return int(self.mask_positions.sum())


def mask_tokens(
    ids: np.ndarray,
    mlm_probability: float,
    seed,
    vocab_size: int,
    mask_id: int = 2,
    special_ids: frozenset[int] | set[int] = frozenset((0, 2, 3, 4)),
    attention_mask: np.ndarray | None = None,
) -> MaskedBatch:
    """Select tokens with probability ``mlm_probability`` and corrupt them 80/10/10."""
    if not 0.0 < mlm_probability < 1.0:
        raise ConfigError(f"mlm_probability must be in (0, 1), got {mlm_probability}")
    ids = np.asarray(ids, dtype=np.int64)
    rng = np.random.default_rng(seed)
    eligible = ~np.isin(ids, list(special_ids))
    if attention_mask is not None:
        eligible &= np.asarray(attention_mask, dtype=bool)
    selected = (rng.random(ids.shape) < mlm_probability) & eligible
    action = rng.random(ids.shape)
    random_ids = rng.integers(0, vocab_size, size=ids.shape)
    corrupted = ids.copy()
    to_mask = selected & (action < 0.8)
    to_random = selected & (action >= 0.8) & (action < 0.9)
    corrupted[to_mask] = mask_id
    corrupted[to_random] = random_ids[to_random]
    return MaskedBatch(ids, corrupted, selected, mlm_probability)


def mlm_loss(logits: Tensor, masked: MaskedBatch, normalizer: int | None = None) -> Tensor:
    """Summed cross-entropy at masked positions divided by ``normalizer``.

    ``normalizer`` defaults to the number of masked positions; passing the
    count for a larger batch lets micro-batch losses add up exactly.
    """
    rows, cols = np.nonzero(masked.mask_positions)
    if rows.size == 0:
        return Tensor(0.0)
    picked = logits[rows, cols]
    logp = nm.log_softmax(picked, axis=-1)
    nll = -logp[np.arange(rows.size), masked.original[rows, cols]].sum()
    return nll * (1.0 / (normalizer or rows.size))


def total_loss(contrastive: Tensor, balance_per_layer: Sequence[Tensor], alpha: float = 1.0) -> Tensor:
    """``contrastive + alpha * mean(balance_per_layer)``."""
    if not balance_per_layer:
        return contrastive
    acc = balance_per_layer[0]
    for b in balance_per_layer[1:]:
        acc = acc + b
    return contrastive + acc * (alpha / len(balance_per_layer))

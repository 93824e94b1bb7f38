"""Token-choice top-k routing, expert dispatch and the load-balancing loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .numeric import Tensor


class ConfigError(ValueError):
    """Invalid model or routing configuration."""


@dataclass
class RouterOutput:
    expert_indices: np.ndarray  # [tokens, k] int
    combine_weights: Tensor  # [tokens, k], rows sum to 1
    full_probs: Tensor  # [tokens, E]


@dataclass
class LoadStats:
    """Per-layer routing statistics.

    Kept as sums so statistics from several forward passes (queries and
    documents, or micro-batches) can be merged before forming the ratios.
    """

    assign_counts: np.ndarray  # [E] token-slots per expert
    prob_sum: Tensor  # [E] summed router probabilities
    token_count: int
    top_k: int

    @property
    def num_experts(self) -> int:
        return len(self.assign_counts)

    @property
    def r(self) -> np.ndarray:
        slots = self.token_count * self.top_k
        return self.assign_counts / slots if slots else np.zeros(self.num_experts)

    @property
    def p(self) -> Tensor:
        return self.prob_sum * (1.0 / max(self.token_count, 1))

    def merge(self, other: "LoadStats") -> "LoadStats":
        return LoadStats(
            self.assign_counts + other.assign_counts,
            self.prob_sum + other.prob_sum,
            self.token_count + other.token_count,
            self.top_k,
        )

    def to_json(self) -> dict:
        return {"r": self.r.tolist(), "p": self.p.data.tolist(), "tokens": self.token_count}


@dataclass
class MoELayerParams:
    router_weight: Tensor  # [hidden, E]
    experts: list[dict[str, Tensor]]  # each: w1 [hidden, mlp], b1, w2 [mlp, hidden], b2
    top_k: int

    @property
    def num_experts(self) -> int:
        return len(self.experts)


def expert_mlp(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    return nm.gelu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def route(hidden: Tensor, params: MoELayerParams) -> RouterOutput:
    E, k = params.num_experts, params.top_k
    if not 1 <= k <= E:
        raise ConfigError(f"top_k={k} must satisfy 1 <= top_k <= num_experts={E}")
    logits = hidden @ params.router_weight
    probs = nm.softmax(logits, axis=-1)
    # stable sort on negated logits: equal logits keep ascending expert order
    order = np.argsort(-logits.data, axis=-1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(hidden.shape[0]), k)
    picked = probs[rows, order.reshape(-1)].reshape(-1, k)
    weights = picked / picked.sum(axis=-1, keepdims=True)
    return RouterOutput(order, weights, probs)


def moe_forward(hidden: Tensor, params: MoELayerParams, mask: np.ndarray | None = None) -> tuple[Tensor, LoadStats]:
    """Dispatch each token to its top-k experts and mix their outputs.

    ``mask`` marks tokens that count towards the load statistics; every token
    is still processed.
    """
    routing = route(hidden, params)
    T = hidden.shape[0]
    k = params.top_k
    idx = routing.expert_indices
    flat_w = routing.combine_weights.reshape(-1)

    rows_all, outputs = [], []
    for j, expert in enumerate(params.experts):
        tok, slot = np.nonzero(idx == j)
        if tok.size == 0:
            continue
        y = expert_mlp(hidden[tok], expert)
        w = flat_w[tok * k + slot].reshape(-1, 1)
        rows_all.append(tok)
        outputs.append(y * w)
    if outputs:
        out = nm.index_add((T, hidden.shape[1]), np.concatenate(rows_all), nm.concat(outputs, axis=0))
    else:
        out = Tensor(np.zeros(hidden.shape))

    keep = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    counts = np.bincount(idx[keep].reshape(-1), minlength=params.num_experts).astype(np.float64)
    prob_sum = routing.full_probs[np.flatnonzero(keep)].sum(axis=0)
    return out, LoadStats(counts, prob_sum, int(keep.sum()), k)


def load_balance_loss(stats: LoadStats, alpha: float = 1.0) -> Tensor:
    """``alpha * sum_i r_i * p_i`` with ``r`` held constant."""
    if stats.token_count == 0:
        return Tensor(0.0)
    return (stats.p * stats.r).sum() * alpha


def balance_surrogate(prob_sum: Tensor, r: np.ndarray, token_count: int) -> Tensor:
    """Balance term for a slice of a larger batch.

    ``r`` and ``token_count`` describe the whole batch, so summing this over
    slices reproduces both the value and the gradient of the full-batch loss.
    """
    return (prob_sum * r).sum() * (1.0 / token_count)


def expert_parameter_count(params: MoELayerParams) -> int:
    return sum(t.size for e in params.experts for t in e.values())

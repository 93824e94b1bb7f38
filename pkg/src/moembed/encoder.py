"""Transformer biencoder with rotary attention and optional MoE sublayers."""

from __future__ import annotations

import enum
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import numeric as nm
from .checkpoint import load_archive, save_archive
from .moe import ConfigError, LoadStats, MoELayerParams, expert_mlp, moe_forward
from .numeric import Tensor

PAD, UNK, MASK = "[PAD]", "[UNK]", "[MASK]"
QUERY_PREFIX, DOCUMENT_PREFIX = "search_query", "search_document"
RESERVED = (PAD, UNK, MASK, QUERY_PREFIX, DOCUMENT_PREFIX, ":")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_ATTN_NEG = -1e9


class InputError(ValueError):
    """Malformed input text or token ids."""


class Role(str, enum.Enum):
    QUERY = "query"
    DOCUMENT = "document"

    @property
    def prefix(self) -> str:
        return f"{QUERY_PREFIX if self is Role.QUERY else DOCUMENT_PREFIX}: "


# -- tokenizer ----------------------------------------------------------------------


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ConfigError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None, min_count: int = 1) -> "Vocabulary":
        counts = Counter(w for t in texts for w in split_words(t))
        for r in RESERVED:
            counts.pop(r, None)
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[: max(0, max_size - len(RESERVED))]
        return cls(list(RESERVED) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def mask_id(self) -> int:
        return 2

    @property
    def special_ids(self) -> frozenset[int]:
        """Ids never chosen for MLM corruption."""
        return frozenset((0, 2, 3, 4))

    def ids(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in words]


def tokenize(text: str, role: Role | str | None, vocab: Vocabulary, max_seq_len: int) -> list[int]:
    """Prefix by role, split, map to ids and truncate to ``max_seq_len``."""
    if not text or not text.strip():
        raise InputError("cannot tokenize empty text")
    if role is not None:
        text = Role(role).prefix + text
    return vocab.ids(split_words(text))[:max_seq_len]


# -- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class LayerKind:
    kind: str = "dense"
    num_experts: int = 0
    top_k: int = 0

    @classmethod
    def dense(cls) -> "LayerKind":
        return cls("dense")

    @classmethod
    def moe(cls, num_experts: int, top_k: int) -> "LayerKind":
        return cls("moe", num_experts, top_k)

    @property
    def is_moe(self) -> bool:
        return self.kind == "moe"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_dim: int = 128
    max_seq_len: int = 64
    rope_base: float = 10000.0
    layer_kinds: tuple[LayerKind, ...] = ()
    output_dims: tuple[int, ...] = ()
    init_std: float = 0.02

    def __post_init__(self):
        if not self.layer_kinds:
            object.__setattr__(self, "layer_kinds", tuple(LayerKind.dense() for _ in range(self.num_layers)))
        else:
            object.__setattr__(self, "layer_kinds", tuple(LayerKind(**k) if isinstance(k, dict) else k for k in self.layer_kinds))
        if not self.output_dims:
            object.__setattr__(self, "output_dims", (self.hidden_dim,))
        else:
            object.__setattr__(self, "output_dims", tuple(int(d) for d in self.output_dims))
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def validate(self) -> None:
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim={self.hidden_dim} not divisible by num_heads={self.num_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim={self.head_dim} must be even for rotary embeddings")
        if len(self.layer_kinds) != self.num_layers:
            raise ConfigError(f"layer_kinds has {len(self.layer_kinds)} entries for {self.num_layers} layers")
        for i, kind in enumerate(self.layer_kinds):
            if kind.kind not in ("dense", "moe"):
                raise ConfigError(f"layer {i}: unknown kind {kind.kind!r}")
            if kind.is_moe and not 1 <= kind.top_k <= kind.num_experts:
                raise ConfigError(f"layer {i}: top_k={kind.top_k} must be in [1, {kind.num_experts}]")
        dims = list(self.output_dims)
        if dims != sorted(dims, reverse=True) or len(set(dims)) != len(dims):
            raise ConfigError(f"output_dims must be strictly descending, got {dims}")
        if dims[0] > self.hidden_dim or dims[-1] < 1:
            raise ConfigError(f"output_dims {dims} outside [1, {self.hidden_dim}]")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["layer_kinds"] = [asdict(k) for k in self.layer_kinds]
        d["output_dims"] = list(self.output_dims)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["layer_kinds"] = tuple(LayerKind(**k) for k in d.get("layer_kinds", ()))
        d["output_dims"] = tuple(d.get("output_dims", ()))
        return cls(**d)


@dataclass
class TokenBatch:
    token_ids: np.ndarray  # [batch, seq] int
    attention_mask: np.ndarray  # [batch, seq] bool
    role: Role | None = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=bool)
        if self.token_ids.shape != self.attention_mask.shape:
            raise InputError("token_ids and attention_mask shapes differ")
        if not self.attention_mask.any(axis=1).all():
            raise InputError("every row needs at least one unmasked token")

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def rows(self, index) -> "TokenBatch":
        ids, mask = self.token_ids[index], self.attention_mask[index]
        width = max(1, int(mask.sum(axis=1).max()))
        return TokenBatch(ids[:, :width], mask[:, :width], self.role)


def pad_sequences(seqs: Sequence[Sequence[int]], role: Role | None = None, pad_id: int = 0) -> TokenBatch:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return TokenBatch(ids, mask, role)


def make_batch(texts: Sequence[str], role: Role | str | None, vocab: Vocabulary, max_len: int) -> TokenBatch:
    role = Role(role) if role is not None else None
    return pad_sequences([tokenize(t, role, vocab, max_len) for t in texts], role, vocab.pad_id)


# -- model --------------------------------------------------------------------------


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict[str, Tensor]
    vocab: Vocabulary | None = None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "EncoderModel":
        params = {n: nm.parameter(p.data.copy(), name=n) for n, p in self.params.items()}
        return EncoderModel(self.config, params, self.vocab)

    def moe_params(self, layer: int) -> MoELayerParams:
        kind = self.config.layer_kinds[layer]
        if not kind.is_moe:
            raise ConfigError(f"layer {layer} is dense")
        pre = f"layers.{layer}.moe"
        experts = [
            {n: self.params[f"{pre}.experts.{j}.{n}"] for n in ("w1", "b1", "w2", "b2")} for j in range(kind.num_experts)
        ]
        return MoELayerParams(self.params[f"{pre}.router"], experts, kind.top_k)

    def moe_layers(self) -> list[int]:
        return [i for i, k in enumerate(self.config.layer_kinds) if k.is_moe]

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"config": self.config.to_json(), "vocab": self.vocab.tokens if self.vocab else None}
        if extra:
            meta.update(extra)
        save_archive(path, meta, {n: p.data for n, p in self.params.items()})

    @classmethod
    def load(cls, path) -> "EncoderModel":
        meta, tensors = load_archive(path)
        config = EncoderConfig.from_json(meta["config"])
        vocab = Vocabulary(meta["vocab"]) if meta.get("vocab") else None
        params = {n: nm.parameter(a, name=n) for n, a in tensors.items() if not n.startswith("optim.")}
        return cls(config, params, vocab)


def dense_mlp_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    return {"w1": (cfg.hidden_dim, cfg.mlp_dim), "b1": (cfg.mlp_dim,), "w2": (cfg.mlp_dim, cfg.hidden_dim), "b2": (cfg.hidden_dim,)}


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, derived from the config alone."""
    H = cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, H)}
    for i, kind in enumerate(cfg.layer_kinds):
        pre = f"layers.{i}"
        for n in ("ln1", "ln2"):
            shapes[f"{pre}.{n}.w"] = (H,)
            shapes[f"{pre}.{n}.b"] = (H,)
        for n in ("q", "k", "v", "o"):
            shapes[f"{pre}.attn.{n}.w"] = (H, H)
            shapes[f"{pre}.attn.{n}.b"] = (H,)
        mlp = dense_mlp_shapes(cfg)
        if kind.is_moe:
            shapes[f"{pre}.moe.router"] = (H, kind.num_experts)
            for j in range(kind.num_experts):
                for n, s in mlp.items():
                    shapes[f"{pre}.moe.experts.{j}.{n}"] = s
        else:
            for n, s in mlp.items():
                shapes[f"{pre}.mlp.{n}"] = s
    shapes["final_ln.w"] = (H,)
    shapes["final_ln.b"] = (H,)
    shapes["mlm.w"] = (H, cfg.vocab_size)
    shapes["mlm.b"] = (cfg.vocab_size,)
    return shapes


def init_model(config: EncoderConfig, seed: int = 0, vocab: Vocabulary | None = None) -> EncoderModel:
    if vocab is not None and len(vocab) != config.vocab_size:
        raise ConfigError(f"vocab has {len(vocab)} tokens but config.vocab_size={config.vocab_size}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("router"):
            data = np.zeros(shape)
        elif name.endswith((".w", "w1", "w2")) and len(shape) == 2 or name == "embed":
            data = rng.normal(0.0, config.init_std, size=shape)
        elif ".ln" in name and name.endswith(".w") or name == "final_ln.w":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = nm.parameter(data, name=name)
    return EncoderModel(config, params, vocab)


# -- forward ------------------------------------------------------------------------


def rope_angles(seq_len: int, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin of ``pos * base**(-2i/head_dim)``, shape [seq, head_dim/2]."""
    if head_dim % 2:
        raise ConfigError(f"head_dim={head_dim} must be even")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    theta = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(theta), np.sin(theta)


def rope_apply(x: Tensor, positions: np.ndarray | None = None, base: float = 10000.0) -> Tensor:
    """Rotate pairs (2i, 2i+1) of the last axis of ``[batch, heads, seq, head_dim]``."""
    head_dim = x.shape[-1]
    if head_dim % 2:
        raise ConfigError(f"head_dim={head_dim} must be even")
    if positions is None:
        positions = np.arange(x.shape[-2])
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    theta = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    return nm.rotate_pairs(x, np.cos(theta), np.sin(theta))


def _linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _attention(x: Tensor, model: EncoderModel, layer: int, mask_bias: np.ndarray) -> Tensor:
    cfg, p = model.config, model.params
    B, S, H = x.shape
    nh, hd = cfg.num_heads, cfg.head_dim
    pre = f"layers.{layer}.attn"

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, S, nh, hd).transpose(0, 2, 1, 3)

    q = rope_apply(heads(_linear(x, p, f"{pre}.q")), base=cfg.rope_base)
    k = rope_apply(heads(_linear(x, p, f"{pre}.k")), base=cfg.rope_base)
    v = heads(_linear(x, p, f"{pre}.v"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd)) + mask_bias
    ctx = nm.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, S, H)
    return _linear(ctx, p, f"{pre}.o")


def _feed_forward(h: Tensor, model: EncoderModel, layer: int, mask: np.ndarray) -> tuple[Tensor, LoadStats | None]:
    kind = model.config.layer_kinds[layer]
    if not kind.is_moe:
        p = model.params
        mlp = {n: p[f"layers.{layer}.mlp.{n}"] for n in ("w1", "b1", "w2", "b2")}
        return expert_mlp(h, mlp), None
    B, S, H = h.shape
    valid = np.flatnonzero(mask.reshape(-1))
    out, stats = moe_forward(h.reshape(B * S, H)[valid], model.moe_params(layer))
    return nm.index_add((B * S, H), valid, out).reshape(B, S, H), stats


def hidden_states(model: EncoderModel, batch: TokenBatch) -> tuple[Tensor, list[LoadStats]]:
    """Final layer-normed token states ``[batch, seq, hidden]`` and routing stats."""
    cfg, p = model.config, model.params
    ids = batch.token_ids
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    mask = batch.attention_mask
    mask_bias = np.where(mask, 0.0, _ATTN_NEG)[:, None, None, :]
    x = p["embed"][ids]
    stats = []
    for layer in range(cfg.num_layers):
        pre = f"layers.{layer}"
        x = x + _attention(nm.layer_norm(x, p[f"{pre}.ln1.w"], p[f"{pre}.ln1.b"]), model, layer, mask_bias)
        ff, layer_stats = _feed_forward(nm.layer_norm(x, p[f"{pre}.ln2.w"], p[f"{pre}.ln2.b"]), model, layer, mask)
        x = x + ff
        if layer_stats is not None:
            stats.append(layer_stats)
    return nm.layer_norm(x, p["final_ln.w"], p["final_ln.b"]), stats


def encode(model: EncoderModel, batch: TokenBatch) -> tuple[Tensor, list[LoadStats]]:
    """Mask-aware mean pooled, L2-normalised embeddings plus per-MoE-layer stats."""
    h, stats = hidden_states(model, batch)
    m = batch.attention_mask.astype(np.float64)
    pooled = (h * m[:, :, None]).sum(axis=1) * (1.0 / m.sum(axis=1, keepdims=True))
    return nm.l2_normalize(pooled, axis=-1), stats


def truncate_embedding(e: Tensor, dim: int, config: EncoderConfig | None = None) -> Tensor:
    """Keep the leading ``dim`` coordinates and renormalise.

    Full width is returned untouched (rows are already unit norm).
    """
    if config is not None and dim not in config.output_dims:
        raise ConfigError(f"dim={dim} not in configured output_dims {list(config.output_dims)}")
    if dim == e.shape[-1]:
        return e
    if not 1 <= dim < e.shape[-1]:
        raise ConfigError(f"cannot truncate width {e.shape[-1]} to {dim}")
    return nm.l2_normalize(e[..., :dim], axis=-1)


def mlm_forward(model: EncoderModel, batch: TokenBatch) -> tuple[Tensor, list[LoadStats]]:
    """Vocabulary logits ``[batch, seq, vocab]`` for every position."""
    h, stats = hidden_states(model, batch)
    return h @ model.params["mlm.w"] + model.params["mlm.b"], stats


def embed_texts(
    model: EncoderModel,
    texts: Sequence[str],
    role: Role | str,
    max_len: int | None = None,
    dim: int | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Inference helper returning a numpy array of unit embeddings."""
    if model.vocab is None:
        raise ConfigError("model has no vocabulary attached")
    max_len = max_len or model.config.max_seq_len
    out = []
    for start in range(0, len(texts), batch_size):
        batch = make_batch(texts[start : start + batch_size], role, model.vocab, max_len)
        emb, _ = encode(model, batch)
        if dim is not None:
            emb = truncate_embedding(emb, dim, model.config)
        out.append(emb.data)
    width = dim or model.config.hidden_dim
    return np.concatenate(out, axis=0) if out else np.zeros((0, width))


def active_parameter_count(model: EncoderModel, include_mlm_head: bool = False) -> int:
    """Parameters touched per token: everything dense plus k/E of each expert bank."""
    total = 0.0
    moe_prefixes = {f"layers.{i}.moe.experts." for i in model.moe_layers()}
    for name, p in model.params.items():
        if name.startswith("mlm.") and not include_mlm_head:
            continue
        if any(name.startswith(pre) for pre in moe_prefixes):
            continue
        total += p.size
    for i in model.moe_layers():
        kind = model.config.layer_kinds[i]
        expert_total = sum(t.size for e in model.moe_params(i).experts for t in e.values())
        total += expert_total * kind.top_k / kind.num_experts
    return int(round(total))


def total_parameter_count(model: EncoderModel, include_mlm_head: bool = False) -> int:
    return sum(p.size for n, p in model.params.items() if include_mlm_head or not n.startswith("mlm."))


def with_layer_kinds(config: EncoderConfig, kinds: Sequence[LayerKind]) -> EncoderConfig:
    return replace(config, layer_kinds=tuple(kinds))

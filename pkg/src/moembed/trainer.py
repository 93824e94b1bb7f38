"""Training loop for the MLM, contrastive-pretraining and finetuning stages."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numeric as nm
from .checkpoint import load_archive, save_archive
from .datapipe import BatchSampler, PairBatch, PairRecord, group_by_dataset, language_weights
from .encoder import EncoderModel, Role, encode, make_batch, mlm_forward, pad_sequences, tokenize
from .moe import ConfigError, LoadStats, balance_surrogate, load_balance_loss
from .numeric import Tensor
from .objectives import infonce, mask_tokens, mlm_loss, mrl_loss, total_loss

log = logging.getLogger(__name__)

STAGES = ("mlm", "contrastive_pretrain", "contrastive_finetune")


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "contrastive_pretrain"
    batch_size: int = 64
    peak_lr: float = 8e-5
    warmup_steps: int = 1000
    total_steps: int | None = None
    epochs: int | None = 1
    schedule: str = "cosine"
    max_grad_norm: float = 1.0
    tau: float = 0.02
    alpha: float = 1.0
    max_len_query: int = 32
    max_len_doc: int = 256
    max_len: int = 2048
    mrl_dims: tuple[int, ...] = ()
    num_hard_negatives: int = 0
    mlm_probability: float = 0.3
    language_alpha: float = 0.3
    grad_accum_steps: int = 1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mrl_dims", tuple(int(d) for d in self.mrl_dims))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.schedule not in ("linear", "cosine"):
            raise ConfigError(f"schedule must be 'linear' or 'cosine', got {self.schedule!r}")
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr must be positive")
        if self.total_steps is None and self.epochs is None:
            raise ConfigError("one of total_steps or epochs is required")
        if self.total_steps is not None and self.warmup_steps > self.total_steps:
            raise ConfigError(f"warmup_steps={self.warmup_steps} exceeds total_steps={self.total_steps}")
        if self.grad_accum_steps < 1 or self.batch_size < 1:
            raise ConfigError("batch_size and grad_accum_steps must be positive")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")

    @classmethod
    def mlm(cls, **overrides) -> "TrainConfig":
        base = dict(stage="mlm", batch_size=4096, peak_lr=4e-4, warmup_steps=500, total_steps=10_000,
                    epochs=None, schedule="linear", max_grad_norm=1.0, grad_accum_steps=8, max_len=2048)
        return cls(**{**base, **overrides})

    @classmethod
    def pretrain(cls, **overrides) -> "TrainConfig":
        base = dict(stage="contrastive_pretrain", batch_size=16_384, peak_lr=8e-5, warmup_steps=1000,
                    epochs=1, schedule="cosine", tau=0.02, alpha=1.0, max_len_query=32, max_len_doc=256)
        return cls(**{**base, **overrides})

    @classmethod
    def finetune(cls, **overrides) -> "TrainConfig":
        base = dict(stage="contrastive_finetune", batch_size=256, peak_lr=2e-5, warmup_steps=400, epochs=1,
                    schedule="linear", tau=0.02, alpha=1.0, max_len_query=512, max_len_doc=512,
                    num_hard_negatives=10, mrl_dims=(768, 256))
        return cls(**{**base, **overrides})

    def to_json(self) -> dict:
        d = asdict(self)
        d["mrl_dims"] = list(self.mrl_dims)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warmup to ``peak_lr`` then cosine or linear decay to zero."""
    total = total_steps if total_steps is not None else cfg.total_steps
    if total is None:
        raise ConfigError("total_steps unknown")
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= total:
        return 0.0
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / max(total - cfg.warmup_steps, 1)
    if cfg.schedule == "cosine":
        return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.peak_lr * (1.0 - progress)


class AdamW:
    """Adam with decoupled weight decay on matrices only."""

    def __init__(self, params: Mapping[str, Tensor], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, params: Mapping[str, Tensor], lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; return the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


# -- samplers -----------------------------------------------------------------------


class LanguageSampler:
    """MLM text batches whose language is drawn with temperature-smoothed weights."""

    def __init__(self, texts_by_language: Mapping[str, Sequence[str]], batch_size: int, seed: int, alpha: float):
        self.texts = {k: list(v) for k, v in sorted(texts_by_language.items())}
        if any(len(v) < batch_size for v in self.texts.values()):
            raise ConfigError(f"every language needs at least batch_size={batch_size} texts")
        self.batch_size = batch_size
        self.seed = seed
        self.langs = list(self.texts)
        weights = language_weights({k: len(v) for k, v in self.texts.items()}, alpha)
        self.probs = np.array([weights[k] for k in self.langs])
        self.draws = 0
        self.cursors = {k: [0, 0] for k in self.langs}  # epoch, position

    def batches_per_epoch(self) -> int:
        return max(1, sum(len(v) for v in self.texts.values()) // self.batch_size)

    def __next__(self) -> PairBatch:
        rng = np.random.default_rng([self.seed, self.draws])
        lang = self.langs[int(rng.choice(len(self.langs), p=self.probs))]
        self.draws += 1
        epoch, pos = self.cursors[lang]
        n = len(self.texts[lang])
        if pos + self.batch_size > n:
            epoch, pos = epoch + 1, 0
        perm = np.random.default_rng([self.seed, epoch, self.langs.index(lang) + 1]).permutation(n)
        idx = perm[pos : pos + self.batch_size]
        self.cursors[lang] = [epoch, pos + self.batch_size]
        return PairBatch([self.texts[lang][i] for i in idx], lang)

    def state_dict(self) -> dict:
        return {"draws": self.draws, "cursors": self.cursors}

    def load_state_dict(self, state: Mapping) -> None:
        self.draws = int(state["draws"])
        self.cursors = {k: list(v) for k, v in state["cursors"].items()}


def make_sampler(cfg: TrainConfig, data):
    per_step = cfg.batch_size * cfg.grad_accum_steps
    if cfg.stage == "mlm":
        by_lang: dict[str, list[str]] = {}
        for item in data:
            if isinstance(item, PairRecord):
                by_lang.setdefault(item.language, []).append(item.document)
            elif isinstance(item, str):
                by_lang.setdefault("xx", []).append(item)
            else:
                text, lang = item
                by_lang.setdefault(lang, []).append(text)
        return LanguageSampler(by_lang, per_step, cfg.seed, cfg.language_alpha)
    records = list(data)
    if not all(isinstance(r, PairRecord) for r in records):
        raise ConfigError(f"stage {cfg.stage} expects PairRecord data")
    if cfg.stage == "contrastive_finetune":
        short = [i for i, r in enumerate(records) if len(r.hard_negatives or ()) < cfg.num_hard_negatives]
        if short:
            raise ConfigError(
                f"{len(short)} records have fewer than {cfg.num_hard_negatives} hard negatives (first: #{short[0]})"
            )
    return BatchSampler(group_by_dataset(records), per_step, cfg.seed)


# -- state --------------------------------------------------------------------------


@dataclass
class TrainState:
    model: EncoderModel
    optimizer: AdamW
    sampler: object
    step: int = 0
    total_steps: int = 0
    history: list[float] = field(default_factory=list)

    def save(self, path, cfg: TrainConfig) -> None:
        extra = {
            "train": {
                "config": cfg.to_json(),
                "step": self.step,
                "total_steps": self.total_steps,
                "adam_t": self.optimizer.t,
                "sampler": self.sampler.state_dict(),
                "history": self.history,
            }
        }
        tensors = {n: p.data for n, p in self.model.params.items()}
        tensors.update({f"optim.m.{n}": a for n, a in self.optimizer.m.items()})
        tensors.update({f"optim.v.{n}": a for n, a in self.optimizer.v.items()})
        meta = {"config": self.model.config.to_json(), "vocab": self.model.vocab.tokens if self.model.vocab else None}
        meta.update(extra)
        save_archive(path, meta, tensors)


def init_state(model: EncoderModel, cfg: TrainConfig, data) -> TrainState:
    sampler = make_sampler(cfg, data)
    total = cfg.total_steps if cfg.total_steps is not None else cfg.epochs * sampler.batches_per_epoch()
    if cfg.warmup_steps > total:
        raise ConfigError(f"warmup_steps={cfg.warmup_steps} exceeds total steps {total}")
    opt = AdamW(model.params, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    return TrainState(model, opt, sampler, 0, total)


def load_state(path, cfg: TrainConfig, data) -> TrainState:
    meta, tensors = load_archive(path)
    model = EncoderModel.load(path)
    state = init_state(model, cfg, data)
    train = meta.get("train")
    if train is None:
        return state
    state.step = train["step"]
    state.total_steps = train["total_steps"]
    state.history = list(train["history"])
    state.optimizer.t = train["adam_t"]
    for n in model.params:
        state.optimizer.m[n] = tensors[f"optim.m.{n}"].copy()
        state.optimizer.v[n] = tensors[f"optim.v.{n}"].copy()
    state.sampler.load_state_dict(train["sampler"])
    return state


# -- losses -------------------------------------------------------------------------


def _merge_stats(per_pass: Sequence[Sequence[LoadStats]]) -> list[LoadStats]:
    merged = list(per_pass[0])
    for stats in per_pass[1:]:
        merged = [a.merge(b) for a, b in zip(merged, stats)]
    return merged


def _balance_terms(stats: Sequence[LoadStats]) -> list[Tensor]:
    return [load_balance_loss(s, 1.0) for s in stats]


@dataclass
class _ContrastiveInputs:
    queries: object
    docs: object
    hard: object | None
    num_hard: int


def _contrastive_inputs(model: EncoderModel, records: Sequence[PairRecord], cfg: TrainConfig) -> _ContrastiveInputs:
    vocab = model.vocab
    q = make_batch([r.query for r in records], Role.QUERY, vocab, cfg.max_len_query)
    d = make_batch([r.document for r in records], Role.DOCUMENT, vocab, cfg.max_len_doc)
    H = cfg.num_hard_negatives if cfg.stage == "contrastive_finetune" else 0
    hard = None
    if H:
        hard = make_batch([t for r in records for t in r.hard_negatives[:H]], Role.DOCUMENT, vocab, cfg.max_len_doc)
    return _ContrastiveInputs(q, d, hard, H)


def _contrastive_loss(cfg: TrainConfig, q: Tensor, d: Tensor, hard: Tensor | None) -> Tensor:
    if cfg.stage == "contrastive_finetune":
        hard3 = hard.reshape(q.shape[0], cfg.num_hard_negatives, q.shape[1]) if hard is not None else None
        dims = cfg.mrl_dims or (q.shape[1],)
        return mrl_loss(q, d, hard3, dims, cfg.tau)
    return infonce(q @ d.T, cfg.tau)


def _encode_slice(model, inputs: _ContrastiveInputs, rows: np.ndarray):
    """Encode one micro-batch of rows; returns embeddings and per-pass stats."""
    q, sq = encode(model, inputs.queries.rows(rows))
    d, sd = encode(model, inputs.docs.rows(rows))
    passes = [sq, sd]
    h = None
    if inputs.hard is not None:
        H = inputs.num_hard
        hrows = (rows[:, None] * H + np.arange(H)).reshape(-1)
        h, sh = encode(model, inputs.hard.rows(hrows))
        passes.append(sh)
    return q, d, h, passes


def _check_finite(value: float, stats: Sequence[LoadStats], step: int) -> None:
    if not math.isfinite(value):
        dump = [s.to_json() for s in stats]
        raise TrainingError(f"non-finite loss at step {step}; routing stats: {json.dumps(dump)}")


def contrastive_gradients(model: EncoderModel, records: Sequence[PairRecord], cfg: TrainConfig, step: int = 0) -> dict:
    """Accumulate parameter gradients for one optimizer step; return loss metrics.

    With ``grad_accum_steps > 1`` the loss still couples every pair in the
    step: embeddings are first computed for all micro-batches, the loss is
    differentiated w.r.t. those cached embeddings, and each micro-batch is then
    re-encoded and back-propagated with its slice of that gradient.
    """
    inputs = _contrastive_inputs(model, records, cfg)
    n = len(records)
    chunks = np.array_split(np.arange(n), cfg.grad_accum_steps)

    if cfg.grad_accum_steps == 1:
        q, d, h, passes = _encode_slice(model, inputs, chunks[0])
        stats = _merge_stats(passes)
        con = _contrastive_loss(cfg, q, d, h)
        balance = _balance_terms(stats)
        loss = total_loss(con, balance, cfg.alpha)
        _check_finite(loss.item(), stats, step)
        loss.backward()
        return _metrics(loss, con, balance)

    cached = [_encode_slice(model, inputs, rows) for rows in chunks]
    stats = _merge_stats([_merge_stats(c[3]) for c in cached])
    q = nm.parameter(np.concatenate([c[0].data for c in cached]))
    d = nm.parameter(np.concatenate([c[1].data for c in cached]))
    h = nm.parameter(np.concatenate([c[2].data for c in cached])) if inputs.hard is not None else None
    con = _contrastive_loss(cfg, q, d, h)
    detached = [LoadStats(s.assign_counts, s.prob_sum.detach(), s.token_count, s.top_k) for s in stats]
    balance = _balance_terms(detached)
    loss = total_loss(con, balance, cfg.alpha)
    _check_finite(loss.item(), detached, step)
    con.backward()

    layers = len(stats)
    for rows in chunks:
        qs, ds, hs, passes = _encode_slice(model, inputs, rows)
        H = inputs.num_hard
        surrogate = (qs * q.grad[rows]).sum() + (ds * d.grad[rows]).sum()
        if hs is not None:
            hrows = (rows[:, None] * H + np.arange(H)).reshape(-1)
            surrogate = surrogate + (hs * h.grad[hrows]).sum()
        if layers:
            local = _merge_stats(passes)
            terms = [balance_surrogate(ls.prob_sum, full.r, full.token_count) for ls, full in zip(local, stats)]
            acc = terms[0]
            for t in terms[1:]:
                acc = acc + t
            surrogate = surrogate + acc * (cfg.alpha / layers)
        surrogate.backward()
    return _metrics(loss, con, balance)


def mlm_gradients(model: EncoderModel, texts: Sequence[str], cfg: TrainConfig, step: int = 0) -> dict:
    vocab = model.vocab
    batch = pad_sequences([tokenize(t, None, vocab, cfg.max_len) for t in texts], None, vocab.pad_id)
    masked = mask_tokens(
        batch.token_ids, cfg.mlm_probability, [cfg.seed, step], len(vocab), vocab.mask_id, vocab.special_ids,
        batch.attention_mask,
    )
    norm = max(masked.num_masked, 1)
    chunks = np.array_split(np.arange(len(texts)), cfg.grad_accum_steps)

    full_stats = None
    if model.moe_layers() and cfg.grad_accum_steps > 1:
        full_stats = _merge_stats([mlm_forward(model, _masked_rows(batch, masked, rows))[1] for rows in chunks])

    con_total, loss_total = 0.0, 0.0
    all_stats = []
    for rows in chunks:
        sub = _masked_rows(batch, masked, rows)
        logits, stats = mlm_forward(model, sub)
        sub_masked = replace(masked, original=batch.token_ids[rows][:, : sub.token_ids.shape[1]],
                             corrupted=sub.token_ids, mask_positions=masked.mask_positions[rows][:, : sub.token_ids.shape[1]])
        con = mlm_loss(logits, sub_masked, norm)
        loss = con
        if stats:
            if full_stats is None:
                balance = _balance_terms(stats)
            else:
                balance = [balance_surrogate(ls.prob_sum, full.r, full.token_count) for ls, full in zip(stats, full_stats)]
            loss = total_loss(con, balance, cfg.alpha)
            all_stats.append(stats)
        _check_finite(loss.item(), stats, step)
        loss.backward()
        con_total += con.item()
        loss_total += loss.item()
    balance_values = []
    if all_stats:
        merged = full_stats or _merge_stats(all_stats)
        balance_values = [b.item() for b in _balance_terms(merged)]
        loss_total = con_total + cfg.alpha * float(np.mean(balance_values))
    return {"loss": loss_total, "contrastive": con_total, "balance_per_layer": balance_values, "masked": masked.num_masked}


def _masked_rows(batch, masked, rows):
    sub = batch.rows(rows)
    width = sub.token_ids.shape[1]
    return type(batch)(masked.corrupted[rows][:, :width], sub.attention_mask, None)


def _metrics(loss: Tensor, con: Tensor, balance: Sequence[Tensor]) -> dict:
    return {"loss": loss.item(), "contrastive": con.item(), "balance_per_layer": [b.item() for b in balance]}


def train_step(state: TrainState, batch: PairBatch, cfg: TrainConfig) -> dict:
    """One optimizer update: gradients, global-norm clipping, AdamW step."""
    model = state.model
    model.zero_grad()
    if cfg.stage == "mlm":
        metrics = mlm_gradients(model, batch.records, cfg, state.step)
    else:
        metrics = contrastive_gradients(model, batch.records, cfg, state.step)
    grad_norm = clip_grad_norm(model.parameters(), cfg.max_grad_norm)
    lr = lr_at(state.step, cfg, state.total_steps)
    state.optimizer.step(model.params, lr)
    metrics.update(step=state.step, lr=lr, grad_norm=grad_norm, dataset=batch.dataset)
    state.history.append(metrics["loss"])
    state.step += 1
    return metrics


def routing_records(model: EncoderModel, batch: PairBatch, cfg: TrainConfig, step: int) -> list[dict]:
    """Per-layer routing statistics for a batch, one JSON-ready row per MoE layer."""
    if not model.moe_layers() or cfg.stage == "mlm":
        return []
    inputs = _contrastive_inputs(model, batch.records, cfg)
    _, _, _, passes = _encode_slice(model, inputs, np.arange(len(batch.records)))
    rows = []
    for layer, s in zip(model.moe_layers(), _merge_stats(passes)):
        rows.append({"step": step, "layer": layer, "r": s.r.tolist(), "p": s.p.data.tolist(),
                     "balance_loss": load_balance_loss(s, 1.0).item()})
    return rows


def run_stage(
    cfg: TrainConfig,
    data,
    init: EncoderModel | str | Path,
    out_dir: str | Path | None = None,
    stop_at: int | None = None,
    log_routing: bool = False,
) -> TrainState:
    """Run (or resume) a stage. ``init`` is a model or a checkpoint path.

    Writes ``metrics.jsonl`` (and ``routing.jsonl`` when requested) plus a
    ``checkpoint.bin`` into ``out_dir`` when given.
    """
    if isinstance(init, (str, Path)):
        state = load_state(init, cfg, data)
    else:
        state = init_state(init, cfg, data)
    if state.model.vocab is None:
        raise ConfigError("model needs a vocabulary for training")
    end = state.total_steps if stop_at is None else min(stop_at, state.total_steps)
    metrics_fh = routing_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if state.step else "w"
        metrics_fh = open(out_dir / "metrics.jsonl", mode, encoding="utf-8")
        if log_routing:
            routing_fh = open(out_dir / "routing.jsonl", mode, encoding="utf-8")
    try:
        while state.step < end:
            batch = next(state.sampler)
            m = train_step(state, batch, cfg)
            if metrics_fh:
                row = {k: m[k] for k in ("step", "lr", "loss", "contrastive", "balance_per_layer", "grad_norm")}
                metrics_fh.write(json.dumps(row) + "\n")
            if routing_fh:
                for row in routing_records(state.model, batch, cfg, m["step"]):
                    routing_fh.write(json.dumps(row) + "\n")
            if m["step"] % 50 == 0:
                log.info("step %d loss %.5f lr %.3g", m["step"], m["loss"], m["lr"])
    finally:
        for fh in (metrics_fh, routing_fh):
            if fh:
                fh.close()
    if out_dir is not None:
        state.save(out_dir / "checkpoint.bin", cfg)
    return state

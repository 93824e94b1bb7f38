"""Desk-scale ablations on the synthetic corpus.

* :func:`run_sweep` trains a dense baseline, an upcycled MoE with the same
  active parameters and a larger dense model at several batch sizes.
* :func:`run_mining_ablation` finetunes with margin-filtered versus plain
  top-k mined negatives.
* :func:`balance_probe` trains a lone MoE router on skewed inputs and tracks
  the balance loss.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numeric as nm
from .datapipe import MiningConfig, ModelEmbedder, mine_records
from .encoder import EncoderConfig, EncoderModel, Vocabulary, active_parameter_count, init_model, total_parameter_count
from .evaluation import compare_runs, ndcg_at_k, retrieve
from .moe import ConfigError, MoELayerParams, load_balance_loss, moe_forward
from .synthetic import SyntheticCorpus, SyntheticSpec
from .trainer import AdamW, TrainConfig, run_stage
from .upcycle import upcycle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelVariant:
    """One arm of the sweep.  ``moe_layers`` empty means a dense model."""

    name: str
    hidden_dim: int = 16
    num_layers: int = 2
    num_heads: int = 2
    mlp_dim: int = 32
    moe_layers: tuple[int, ...] = ()
    num_experts: int = 8
    top_k: int = 1
    router_noise: float = 1e-2
    peak_lr: float = 1e-2

    def build(self, vocab: Vocabulary, seed: int, max_len: int) -> EncoderModel:
        cfg = EncoderConfig(vocab_size=len(vocab), hidden_dim=self.hidden_dim, num_layers=self.num_layers,
                            num_heads=self.num_heads, mlp_dim=self.mlp_dim, max_seq_len=max_len)
        model = init_model(cfg, seed, vocab)
        if self.moe_layers:
            model = upcycle(model, list(self.moe_layers), self.num_experts, self.top_k, seed=seed,
                            router_noise=self.router_noise)
        return model


def default_variants() -> tuple[ModelVariant, ...]:
    return (
        ModelVariant("dense"),
        # top-1 routing receives no task gradient, so initial router noise sets the token split
        ModelVariant("moe", moe_layers=(1,), router_noise=0.1),
        # roughly 3x the dense non-embedding parameters, close to the MoE total
        ModelVariant("large", hidden_dim=28, mlp_dim=56, peak_lr=5e-3),
    )


@dataclass(frozen=True)
class SweepConfig:
    # small vocabulary of paired words with a scrambled lookup: capacity-bound for a 16-wide dense model
    corpus: SyntheticSpec = SyntheticSpec(scrambled=True, num_heads=16, num_modifiers=16, topics_per_dataset=256,
                                          pairs_per_topic=5, doc_filler_words=1, query_filler_words=0)
    variants: tuple[ModelVariant, ...] = field(default_factory=default_variants)
    batch_sizes: tuple[int, ...] = (64, 256, 1024)
    seeds: tuple[int, ...] = (0, 1, 2)
    steps: int = 300
    warmup_fraction: float = 0.1
    tau: float = 0.02
    alpha: float = 1.0
    max_len: int = 16
    eval_k: int = 10
    moe_name: str = "moe"
    dense_name: str = "dense"
    large_name: str = "large"
    tolerance: float = 0.02

    def __post_init__(self):
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variant names: {names}")
        if self.steps < 1:
            raise ConfigError("steps must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["variants"] = [asdict(v) for v in self.variants]
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "SweepConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        if "corpus" in d:
            d["corpus"] = SyntheticSpec(**d["corpus"])
        if "variants" in d:
            d["variants"] = tuple(
                ModelVariant(**{**v, "moe_layers": tuple(v.get("moe_layers", ()))}) for v in d["variants"]
            )
        for key in ("batch_sizes", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _train_config(batch_size: int, steps: int, lr: float, seed: int, sweep: SweepConfig) -> TrainConfig:
    return TrainConfig.pretrain(
        batch_size=batch_size, total_steps=steps, epochs=None, warmup_steps=max(1, int(steps * sweep.warmup_fraction)),
        peak_lr=lr, seed=seed, tau=sweep.tau, alpha=sweep.alpha, max_len_query=sweep.max_len, max_len_doc=sweep.max_len,
    )


def summarize(runs: Sequence[Mapping]) -> list[dict]:
    """Mean and population std of ``score`` per (model, batch_size)."""
    groups: dict[tuple, list[float]] = {}
    for r in runs:
        groups.setdefault((r["model"], r["batch_size"]), []).append(r["score"])
    return [
        {"model": m, "batch_size": b, "mean": float(np.mean(s)), "std": float(np.std(s)), "n": len(s)}
        for (m, b), s in groups.items()
    ]


def trend_checks(summary: Sequence[Mapping], moe: str, dense: str, large: str, tolerance: float) -> dict:
    """Evaluate the two directional claims at the largest batch size."""
    biggest = max(r["batch_size"] for r in summary)
    at = {r["model"]: r["mean"] for r in summary if r["batch_size"] == biggest}
    out = {"batch_size": biggest, "means": at}
    if moe in at and dense in at:
        out["moe_ge_dense"] = at[moe] >= at[dense]
    if moe in at and large in at:
        out["moe_le_large_plus_tol"] = at[moe] <= at[large] + tolerance
    return out


def run_sweep(sweep: SweepConfig = SweepConfig(), out_dir=None) -> dict:
    """Train every (variant, batch size, seed) for a fixed number of steps and score nDCG@k."""
    corpus = SyntheticCorpus(sweep.corpus)
    pairs = corpus.training_pairs()
    task = corpus.eval_task()
    vocab = Vocabulary.build(corpus.all_texts())
    runs = []
    started = time.perf_counter()
    for bs in sweep.batch_sizes:
        for seed in sweep.seeds:
            for v in sweep.variants:
                t0 = time.perf_counter()
                model = v.build(vocab, seed, sweep.max_len)
                state = run_stage(_train_config(bs, sweep.steps, v.peak_lr, seed, sweep), pairs, model)
                score = ndcg_at_k(retrieve(state.model, task, k=sweep.eval_k), task.qrels, sweep.eval_k)
                row = {
                    "model": v.name, "batch_size": bs, "seed": seed, "score": score,
                    "final_loss": state.history[-1], "seconds": time.perf_counter() - t0,
                    "active_params": active_parameter_count(model), "total_params": total_parameter_count(model),
                }
                log.info("%s bs=%d seed=%d ndcg=%.4f (%.1fs)", v.name, bs, seed, score, row["seconds"])
                runs.append(row)
    summary = summarize(runs)
    metric = f"ndcg@{sweep.eval_k}"
    table = compare_runs(
        {f"{r['model']}@{r['batch_size']}": {"score": r["mean"], "std": r["std"], "model": r["model"],
                                              "batch_size": r["batch_size"]} for r in summary},
        metric,
    )
    report = {
        "config": sweep.to_json(),
        "num_pairs": len(pairs),
        "datasets": corpus.datasets,
        "runs": runs,
        "summary": summary,
        "checks": trend_checks(summary, sweep.moe_name, sweep.dense_name, sweep.large_name, sweep.tolerance),
        "table": table,
        "seconds": time.perf_counter() - started,
    }
    if out_dir is not None:
        _write_report(report, out_dir, "sweep", table["text"])
        from .plotting import plot_batch_sweep

        report["figure"] = str(plot_batch_sweep(summary, Path(out_dir) / "sweep.png", metric))
    return report


def _write_report(report: dict, out_dir, stem: str, text: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    (out_dir / f"{stem}.txt").write_text(text + "\n", encoding="utf-8")


# -- mining margin --------------------------------------------------------------------


@dataclass(frozen=True)
class MiningAblationConfig:
    corpus: SyntheticSpec = SyntheticSpec()
    model: ModelVariant = ModelVariant("moe", moe_layers=(1,), top_k=2, peak_lr=1e-2)
    seeds: tuple[int, ...] = (0, 1, 2)
    # a short pretraining run gives a teacher good enough to rank same-topic documents near the positive
    pretrain_steps: int = 40
    pretrain_batch_size: int = 256
    finetune_steps: int = 60
    finetune_batch_size: int = 64
    finetune_lr: float = 3e-3
    margin: float = 0.95
    num_negatives: int = 10
    tau: float = 0.02
    max_len: int = 16

    @classmethod
    def from_json(cls, d: Mapping) -> "MiningAblationConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown mining ablation keys: {sorted(unknown)}")
        if "corpus" in d:
            d["corpus"] = SyntheticSpec(**d["corpus"])
        if "model" in d:
            d["model"] = ModelVariant(**{**d["model"], "moe_layers": tuple(d["model"].get("moe_layers", ()))})
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


def run_mining_ablation(cfg: MiningAblationConfig = MiningAblationConfig(), out_dir=None) -> dict:
    """Pretrain, mine with and without the margin, finetune each arm, compare nDCG@10.

    The pretrained model is both the teacher and the starting point of both
    arms, so the only difference between arms is the negative set.
    """
    corpus = SyntheticCorpus(cfg.corpus)
    pairs = corpus.training_pairs()
    task = corpus.eval_task()
    vocab = Vocabulary.build(corpus.all_texts())
    docs = list(dict.fromkeys(p.document for p in pairs))
    rows = []
    for seed in cfg.seeds:
        pre_cfg = TrainConfig.pretrain(
            batch_size=cfg.pretrain_batch_size, total_steps=cfg.pretrain_steps, epochs=None,
            warmup_steps=max(1, cfg.pretrain_steps // 10), peak_lr=cfg.model.peak_lr, seed=seed, tau=cfg.tau,
            max_len_query=cfg.max_len, max_len_doc=cfg.max_len,
        )
        teacher = run_stage(pre_cfg, pairs, cfg.model.build(vocab, seed, cfg.max_len)).model
        base = ndcg_at_k(retrieve(teacher, task), task.qrels)
        ft_cfg = TrainConfig.finetune(
            batch_size=cfg.finetune_batch_size, total_steps=cfg.finetune_steps, epochs=None,
            warmup_steps=max(1, cfg.finetune_steps // 10), peak_lr=cfg.finetune_lr, seed=seed, tau=cfg.tau,
            max_len_query=cfg.max_len, max_len_doc=cfg.max_len, num_hard_negatives=cfg.num_negatives, mrl_dims=(),
        )
        row = {"seed": seed, "pretrained": base}
        for arm, margin in (("margin", cfg.margin), ("top_k", None)):
            mined, report = mine_records(pairs, docs, ModelEmbedder(teacher, cfg.max_len),
                                         MiningConfig(margin, cfg.num_negatives))
            usable = [r for r in mined if len(r.hard_negatives) >= cfg.num_negatives]
            student = run_stage(ft_cfg, usable, teacher.copy()).model
            row[arm] = ndcg_at_k(retrieve(student, task), task.qrels)
            row[f"{arm}_underfull"] = report["underfull_count"]
        log.info("mining seed=%d margin=%.4f top_k=%.4f", seed, row["margin"], row["top_k"])
        rows.append(row)
    means = {k: float(np.mean([r[k] for r in rows])) for k in ("pretrained", "margin", "top_k")}
    table = compare_runs({"pretrained": means["pretrained"], f"margin {cfg.margin}": means["margin"],
                          "plain top-k": means["top_k"]})
    report = {
        "config": cfg.to_json(),
        "rows": rows,
        "means": means,
        "delta": means["margin"] - means["top_k"],
        "table": table,
    }
    if out_dir is not None:
        _write_report(report, out_dir, "mining", table["text"])
        from .plotting import plot_bars

        stds = [float(np.std([r[k] for r in rows])) for k in ("pretrained", "margin", "top_k")]
        report["figure"] = str(plot_bars(["pretrained", f"margin {cfg.margin}", "top-k"],
                                         [means["pretrained"], means["margin"], means["top_k"]], stds,
                                         Path(out_dir) / "mining.png"))
    return report


# -- balance probe --------------------------------------------------------------------


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return np.zeros(0)
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def balance_probe(
    steps: int = 200,
    seed: int = 0,
    hidden: int = 16,
    num_experts: int = 8,
    top_k: int = 1,
    tokens: int = 256,
    skew: float = 10.0,
    lr: float = 1e-2,
    alpha: float = 1.0,
    window: int = 50,
) -> dict:
    """Train a router on skewed tokens with the balance loss and record its trajectory.

    Tokens share a common offset of size ``skew`` so that a random router
    sends most of them to the same few experts.  Experts stay frozen; only the
    router learns.  Returns the per-step losses and their moving average.
    """
    rng = np.random.default_rng(seed)
    offset = rng.normal(size=hidden)
    offset *= skew / np.linalg.norm(offset)
    router = nm.parameter(rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, num_experts)))
    experts = [
        {"w1": nm.tensor(rng.normal(scale=0.1, size=(hidden, hidden))), "b1": nm.tensor(np.zeros(hidden)),
         "w2": nm.tensor(rng.normal(scale=0.1, size=(hidden, hidden))), "b2": nm.tensor(np.zeros(hidden))}
        for _ in range(num_experts)
    ]
    layer = MoELayerParams(router, experts, top_k)
    opt = AdamW({"router": router}, weight_decay=0.0)
    losses = []
    for step in range(steps):
        x = np.random.default_rng([seed, step]).normal(size=(tokens, hidden)) + offset
        router.grad = None
        _, stats = moe_forward(nm.tensor(x), layer)
        loss = load_balance_loss(stats, alpha)
        loss.backward()
        opt.step({"router": router}, lr)
        losses.append(loss.item())
    ma = moving_average(losses, window)
    return {
        "losses": losses,
        "moving_average": ma.tolist(),
        "uniform_value": alpha / num_experts,
        "first_window": float(ma[0]) if len(ma) else None,
        "last_window": float(ma[-1]) if len(ma) else None,
        "decreased": bool(len(ma) and ma[-1] < ma[0]),
    }


def with_steps(sweep: SweepConfig, steps: int) -> SweepConfig:
    return replace(sweep, steps=steps)

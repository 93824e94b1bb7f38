"""Command-line entry point.

Every subcommand reads a JSON run config (``--config``).  Paths inside the
config are resolved relative to the config file, and flags override config
keys.  Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from .datapipe import (
    BagOfWordsEmbedder,
    MiningConfig,
    ModelEmbedder,
    PairRecord,
    filter_shards,
    make_shards,
    mine_records,
    read_pairs,
    write_pairs,
)
from .encoder import EncoderConfig, EncoderModel, InputError, Role, Vocabulary, embed_texts, init_model
from .evaluation import RetrievalTask, ndcg_at_k, retrieve, write_run
from .moe import ConfigError
from .trainer import TrainConfig, run_stage
from .upcycle import resolve_layers, upcycle

log = logging.getLogger("moembed")

SECTIONS = {
    "encoder": {f.name for f in fields(EncoderConfig)} - {"vocab_size"},
    "vocab": {"max_size", "min_count"},
    "train": {f.name for f in fields(TrainConfig)},
    "data": {"pairs", "texts", "corpus", "task"},
    "upcycle": {"layers", "experts", "top_k", "router_noise"},
    "mining": {"margin", "num_negatives", "candidate_pool"},
    "filter": {"top_k", "shard_size"},
    "eval": {"k", "dim", "max_len"},
}
TOP_LEVEL = set(SECTIONS) | {"init", "teacher", "seed", "sweep", "mining_ablation"}
PATH_KEYS = {("data", k) for k in SECTIONS["data"]} | {(None, "init"), (None, "teacher")}


class ValidationError(Exception):
    """Bad config or input; maps to exit code 1."""


@dataclass
class RunConfig:
    """Parsed run config with paths already resolved."""

    raw: dict = field(default_factory=dict)
    base: Path = Path(".")

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name) or {})

    def get(self, key: str, default=None):
        return self.raw.get(key, default)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls({}, Path.cwd())
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: top level must be an object")
        validate_keys(raw)
        cfg = cls(raw, path.resolve().parent)
        cfg._resolve_paths()
        return cfg

    def _resolve_paths(self) -> None:
        for section, key in PATH_KEYS:
            holder = self.raw if section is None else self.raw.get(section)
            if not holder or holder.get(key) is None:
                continue
            value = holder[key]
            if section is None and key == "teacher" and value == "bow":
                continue
            holder[key] = str((self.base / value).resolve())


def validate_keys(raw: Mapping) -> None:
    for key, value in raw.items():
        if key not in TOP_LEVEL:
            raise ValidationError(f"config.{key}: unknown key (allowed: {sorted(TOP_LEVEL)})")
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ValidationError(f"config.{key}: expected an object")
            for sub in value:
                if sub not in SECTIONS[key]:
                    raise ValidationError(f"config.{key}.{sub}: unknown key (allowed: {sorted(SECTIONS[key])})")


# -- helpers --------------------------------------------------------------------------


def _require(cfg: RunConfig, section: str, key: str) -> str:
    value = cfg.section(section).get(key)
    if value is None:
        raise ValidationError(f"config.{section}.{key}: required for this command")
    if not Path(value).exists():
        raise ValidationError(f"config.{section}.{key}: path does not exist: {value}")
    return value


def _seed(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", cfg.section("train").get("seed", 0)))


def _train_config(cfg: RunConfig, stage: str, seed: int) -> TrainConfig:
    preset = {"mlm": TrainConfig.mlm, "contrastive_pretrain": TrainConfig.pretrain,
              "contrastive_finetune": TrainConfig.finetune}[stage]
    overrides = cfg.section("train")
    if overrides.get("stage", stage) != stage:
        raise ValidationError(f"config.train.stage: {overrides['stage']!r} does not match command stage {stage!r}")
    overrides["stage"] = stage
    overrides["seed"] = seed
    try:
        return preset(**overrides)
    except ConfigError as exc:
        raise ValidationError(f"config.train: {exc}") from None


def _load_model(path: str | None, what: str = "config.init") -> EncoderModel:
    if path is None:
        raise ValidationError(f"{what}: a model checkpoint is required")
    if not Path(path).exists():
        raise ValidationError(f"{what}: checkpoint not found: {path}")
    return EncoderModel.load(path)


def _fresh_model(cfg: RunConfig, texts, seed: int) -> EncoderModel:
    vocab = Vocabulary.build(texts, **cfg.section("vocab"))
    enc = cfg.section("encoder")
    enc.setdefault("max_seq_len", max(32, cfg.section("train").get("max_len_doc", 0) or 0))
    try:
        config = EncoderConfig.from_json({**enc, "vocab_size": len(vocab)})
    except ConfigError as exc:
        raise ValidationError(f"config.encoder: {exc}") from None
    return init_model(config, seed, vocab)


def _init_model(args, cfg: RunConfig, texts, seed: int) -> EncoderModel:
    path = args.init or cfg.get("init")
    if path is not None:
        return _load_model(path, "--init" if args.init else "config.init")
    return _fresh_model(cfg, texts, seed)


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{n}: invalid JSON ({exc})") from None
    return rows


def _pairs(cfg: RunConfig) -> list[PairRecord]:
    path = _require(cfg, "data", "pairs")
    try:
        return read_pairs(path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"config.data.pairs: malformed record ({exc})") from None


def _teacher(args, cfg: RunConfig, pairs):
    source = args.teacher or cfg.get("teacher")
    if source is None:
        raise ValidationError("config.teacher: required (checkpoint path or 'bow')")
    if source == "bow":
        return BagOfWordsEmbedder.fit([t for p in pairs for t in (p.query, p.document)])
    model = _load_model(source, "config.teacher")
    return ModelEmbedder(model, cfg.section("eval").get("max_len"))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- commands -------------------------------------------------------------------------


def cmd_train(args, cfg: RunConfig, stage: str) -> int:
    seed = _seed(args, cfg)
    tc = _train_config(cfg, stage, seed)
    if stage == "mlm":
        if cfg.section("data").get("texts") is not None:
            rows = _read_jsonl(_require(cfg, "data", "texts"))
            data = [(r["text"], r.get("language", "xx")) for r in rows]
            texts = [t for t, _ in data]
        else:
            data = _pairs(cfg)
            texts = [p.document for p in data]
    else:
        data = _pairs(cfg)
        texts = [t for p in data for t in (p.query, p.document, *(p.hard_negatives or ()))]
    if args.steps is not None:
        tc = replace(tc, total_steps=args.steps, epochs=None, warmup_steps=min(tc.warmup_steps, args.steps))
    resume = args.resume
    init = resume if resume else _init_model(args, cfg, texts, seed)
    if resume and not Path(resume).exists():
        raise ValidationError(f"--resume: checkpoint not found: {resume}")
    try:
        state = run_stage(tc, data, init, out_dir=_out(args), log_routing=args.log_routing)
    except ConfigError as exc:
        raise ValidationError(str(exc)) from None
    summary = {"stage": stage, "steps": state.step, "final_loss": state.history[-1] if state.history else None,
               "checkpoint": str(Path(args.out) / "checkpoint.bin")}
    (Path(args.out) / "train_config.json").write_text(json.dumps(tc.to_json(), indent=2), encoding="utf-8")
    _print_json(summary)
    return 0


def cmd_upcycle(args, cfg: RunConfig) -> int:
    dense = _load_model(args.init or cfg.get("init"), "--init" if args.init else "config.init")
    up = cfg.section("upcycle")
    layers_spec = args.layers or up.get("layers", "alternate-from-second")
    experts = args.experts if args.experts is not None else up.get("experts", 8)
    top_k = args.topk if args.topk is not None else up.get("top_k", 2)
    noise = args.router_noise if args.router_noise is not None else up.get("router_noise", 0.0)
    try:
        layers = resolve_layers(layers_spec, dense.config.num_layers)
        model = upcycle(dense, layers, experts, top_k, seed=_seed(args, cfg), router_noise=noise)
    except ConfigError as exc:
        raise ValidationError(f"upcycle: {exc}") from None
    out = _out(args)
    model.save(out / "checkpoint.bin")
    _print_json({"moe_layers": layers, "experts": experts, "top_k": top_k, "checkpoint": str(out / "checkpoint.bin")})
    return 0


def cmd_mine(args, cfg: RunConfig) -> int:
    pairs = _pairs(cfg)
    m = cfg.section("mining")
    margin = m.get("margin", 0.95)
    if args.margin is not None:
        margin = None if args.margin.lower() == "none" else float(args.margin)
    try:
        mcfg = MiningConfig(margin, m.get("num_negatives", 10), m.get("candidate_pool"))
    except ConfigError as exc:
        raise ValidationError(f"config.mining: {exc}") from None
    corpus_path = cfg.section("data").get("corpus")
    if corpus_path is not None:
        corpus = [r["text"] for r in _read_jsonl(_require(cfg, "data", "corpus"))]
    else:
        corpus = list(dict.fromkeys(p.document for p in pairs))
    mined, report = mine_records(pairs, corpus, _teacher(args, cfg, pairs), mcfg)
    out = _out(args)
    write_pairs(out / "mined.jsonl", mined)
    (out / "mining_report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    _print_json(report)
    return 0


def cmd_filter(args, cfg: RunConfig) -> int:
    pairs = _pairs(cfg)
    f = cfg.section("filter")
    top_k = args.top_k if args.top_k is not None else f.get("top_k", 2)
    shards = make_shards(pairs, f.get("shard_size", 1000))
    kept, report = filter_shards(shards, _teacher(args, cfg, pairs), top_k)
    out = _out(args)
    write_pairs(out / "filtered.jsonl", kept)
    (out / "filter_report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    _print_json({k: v for k, v in report.items() if k != "per_shard"})
    return 0


def cmd_embed(args, cfg: RunConfig) -> int:
    model = _load_model(args.init or cfg.get("init"), "--init" if args.init else "config.init")
    if not args.input or not Path(args.input).exists():
        raise ValidationError(f"--input: file not found: {args.input}")
    rows = _read_jsonl(args.input)
    for n, r in enumerate(rows, 1):
        if "text" not in r:
            raise ValidationError(f"{args.input}:{n}: missing 'text'")
    dim = args.dim if args.dim is not None else cfg.section("eval").get("dim")
    if dim is not None and dim not in model.config.output_dims:
        raise ValidationError(f"--dim: {dim} not in configured output_dims {list(model.config.output_dims)}")
    role = None if args.role == "none" else args.role
    vectors = embed_texts(model, [r["text"] for r in rows], role, cfg.section("eval").get("max_len"),
                          None if dim == model.config.hidden_dim else dim)
    out = _out(args)
    path = out / "embeddings.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for i, (r, v) in enumerate(zip(rows, vectors)):
            fh.write(json.dumps({"id": r.get("id", r.get("_id", str(i))), "vector": v.tolist()}) + "\n")
    _print_json({"count": len(rows), "dim": int(vectors.shape[1]), "output": str(path)})
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _load_model(args.init or cfg.get("init"), "--init" if args.init else "config.init")
    task_dir = args.task or _require(cfg, "data", "task")
    try:
        task = RetrievalTask.load(task_dir)
    except FileNotFoundError as exc:
        raise ValidationError(f"task: {exc}") from None
    e = cfg.section("eval")
    k = e.get("k", 10)
    dim = args.dim if args.dim is not None else e.get("dim")
    try:
        run = retrieve(model, task, dim=dim, k=k, max_len=e.get("max_len"))
        score = ndcg_at_k(run, task.qrels, k)
    except ConfigError as exc:
        raise ValidationError(str(exc)) from None
    out = _out(args)
    write_run(out / "run.jsonl", run)
    result = {f"ndcg@{k}": score, "queries": len(task.queries), "documents": len(task.corpus), "dim": dim}
    (out / "eval.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
    print(f"ndcg@{k}\t{score:.6f}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .ablation import MiningAblationConfig, SweepConfig, balance_probe, run_mining_ablation, run_sweep
    from .plotting import plot_curve

    out = _out(args)
    try:
        if args.kind == "sweep":
            sweep = SweepConfig.from_json(cfg.get("sweep") or {})
            if args.seed is not None:
                sweep = replace(sweep, seeds=(args.seed,))
            if args.steps is not None:
                sweep = replace(sweep, steps=args.steps)
            report = run_sweep(sweep, out)
            print(report["table"]["text"])
            _print_json(report["checks"])
        elif args.kind == "mining":
            mcfg = MiningAblationConfig.from_json(cfg.get("mining_ablation") or {})
            if args.seed is not None:
                mcfg = replace(mcfg, seeds=(args.seed,))
            report = run_mining_ablation(mcfg, out)
            print(report["table"]["text"])
            print(f"delta (margin - top-k): {report['delta']:+.4f}")
        else:
            report = balance_probe(steps=args.steps or 200, seed=_seed(args, cfg))
            (out / "balance.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
            plot_curve(report["losses"], out / "balance.png", "balance loss", report["moving_average"])
            print(f"first window {report['first_window']:.5f}  last window {report['last_window']:.5f}  "
                  f"uniform {report['uniform_value']:.5f}")
    except (ConfigError, TypeError) as exc:
        raise ValidationError(f"ablate: {exc}") from None
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    """Write the bundled synthetic corpus: training pairs, MLM texts, an eval task and a starter config."""
    from .synthetic import SyntheticCorpus, SyntheticSpec

    corpus = SyntheticCorpus(SyntheticSpec(seed=_seed(args, cfg)))
    out = _out(args)
    pairs = corpus.training_pairs()
    write_pairs(out / "pairs.jsonl", pairs)
    with open(out / "texts.jsonl", "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"text": p.document, "language": p.language}) + "\n")
    corpus.eval_task().save(out / "task")
    starter = {
        "encoder": {"hidden_dim": 32, "num_layers": 2, "num_heads": 2, "mlp_dim": 64, "max_seq_len": 16,
                    "output_dims": [32, 16]},
        "train": {"batch_size": 64, "peak_lr": 3e-3, "warmup_steps": 5, "total_steps": 50, "epochs": None,
                  "max_len_query": 16, "max_len_doc": 16},
        "data": {"pairs": "pairs.jsonl", "texts": "texts.jsonl", "task": "task"},
        "teacher": "bow",
    }
    (out / "config.json").write_text(json.dumps(starter, indent=2), encoding="utf-8")
    _print_json({"pairs": len(pairs), "datasets": corpus.datasets, "out": str(out)})
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moembed", description="Train and evaluate MoE text embedders.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config; paths inside are relative to this file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        return p

    for name, stage, text in (
        ("mlm", "mlm", "masked-language-model adaptation"),
        ("pretrain", "contrastive_pretrain", "contrastive pretraining on query/document pairs"),
        ("finetune", "contrastive_finetune", "finetuning with mined hard negatives"),
    ):
        p = add(name, text)
        p.add_argument("--init", help="starting checkpoint (overrides config.init)")
        p.add_argument("--resume", help="continue from a checkpoint written by an interrupted run")
        p.add_argument("--steps", type=int, help="override the number of optimizer steps")
        p.add_argument("--log-routing", action="store_true", help="write per-step routing statistics")
        p.set_defaults(func=lambda a, c, s=stage: cmd_train(a, c, s))

    p = add("upcycle", "turn dense MLP layers into expert banks")
    p.add_argument("--init", help="dense checkpoint (overrides config.init)")
    p.add_argument("--layers", help="alternate-from-second, alternate-from-first, all, or a comma list")
    p.add_argument("--experts", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--router-noise", type=float)
    p.set_defaults(func=cmd_upcycle)

    p = add("mine", "mine hard negatives with a teacher model")
    p.add_argument("--teacher", help="teacher checkpoint or 'bow'")
    p.add_argument("--margin", help="fraction of the positive score, or 'none' for plain top-k")
    p.set_defaults(func=cmd_mine)

    p = add("filter", "consistency-filter pairs with a teacher model")
    p.add_argument("--teacher", help="teacher checkpoint or 'bow'")
    p.add_argument("--top-k", type=int)
    p.set_defaults(func=cmd_filter)

    p = add("embed", "embed texts from a JSONL file of {id, text}")
    p.add_argument("--init", help="model checkpoint (overrides config.init)")
    p.add_argument("--input", required=True)
    p.add_argument("--role", choices=[r.value for r in Role] + ["none"], default="query")
    p.add_argument("--dim", type=int)
    p.set_defaults(func=cmd_embed)

    p = add("eval", "nDCG@k on a retrieval task directory")
    p.add_argument("--init", help="model checkpoint (overrides config.init)")
    p.add_argument("--task", help="task directory (overrides config.data.task)")
    p.add_argument("--dim", type=int)
    p.set_defaults(func=cmd_eval)

    p = add("ablate", "desk-scale ablations with JSON, text and PNG reports")
    p.add_argument("--kind", choices=["sweep", "mining", "balance"], default="sweep")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = add("synth", "write the bundled synthetic corpus and a starter config")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        return args.func(args, cfg)
    except (ValidationError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

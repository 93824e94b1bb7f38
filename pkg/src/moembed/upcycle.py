"""Dense-to-MoE upcycling: copy each chosen MLP into every expert of a new bank."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import numeric as nm
from .encoder import EncoderModel, LayerKind, with_layer_kinds
from .moe import ConfigError


def alternate_layers(num_layers: int, start: int = 1) -> list[int]:
    """Every other layer beginning at ``start`` (0-based), e.g. 12 -> [1, 3, ..., 11]."""
    return list(range(start, num_layers, 2))


def resolve_layers(spec: str | Sequence[int], num_layers: int) -> list[int]:
    """Turn a CLI/config layer selector into explicit indices."""
    if not isinstance(spec, str):
        return sorted(int(i) for i in spec)
    if spec == "alternate-from-second":
        return alternate_layers(num_layers, 1)
    if spec == "alternate-from-first":
        return alternate_layers(num_layers, 0)
    if spec == "all":
        return list(range(num_layers))
    try:
        return sorted(int(tok) for tok in spec.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"unrecognised layer selector {spec!r}") from None


def upcycle(
    dense: EncoderModel,
    moe_layer_indices: Iterable[int],
    num_experts: int = 8,
    top_k: int = 2,
    seed: int = 0,
    router_noise: float = 0.0,
) -> EncoderModel:
    """Return a new model whose chosen layers are MoE banks of copied MLPs.

    With ``router_noise == 0`` routers start at zero and the result computes
    the same function as ``dense``; a small positive noise breaks expert
    symmetry for training.
    """
    cfg = dense.config
    indices = sorted(set(int(i) for i in moe_layer_indices))
    if not 1 <= top_k <= num_experts:
        raise ConfigError(f"top_k={top_k} must be in [1, {num_experts}]")
    for i in indices:
        if not 0 <= i < cfg.num_layers:
            raise ConfigError(f"layer index {i} out of range for {cfg.num_layers} layers")
        if cfg.layer_kinds[i].is_moe:
            raise ConfigError(f"layer {i} is already an MoE layer")

    kinds = list(cfg.layer_kinds)
    for i in indices:
        kinds[i] = LayerKind.moe(num_experts, top_k)
    new_cfg = with_layer_kinds(cfg, kinds)

    rng = np.random.default_rng(seed)
    params = {}
    for name, p in dense.params.items():
        parts = name.split(".")
        if parts[0] == "layers" and int(parts[1]) in indices and parts[2] == "mlp":
            continue
        params[name] = nm.parameter(p.data.copy(), name=name)
    for i in indices:
        pre = f"layers.{i}"
        router = np.zeros((cfg.hidden_dim, num_experts))
        if router_noise > 0:
            router = rng.normal(0.0, router_noise, size=router.shape)
        params[f"{pre}.moe.router"] = nm.parameter(router, name=f"{pre}.moe.router")
        for j in range(num_experts):
            for n in ("w1", "b1", "w2", "b2"):
                name = f"{pre}.moe.experts.{j}.{n}"
                params[name] = nm.parameter(dense.params[f"{pre}.mlp.{n}"].data.copy(), name=name)
    return EncoderModel(new_cfg, params, dense.vocab)

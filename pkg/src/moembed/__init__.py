"""Mixture-of-experts text embedders on a small numpy autodiff core."""

from .encoder import EncoderConfig, EncoderModel, Role, Vocabulary, encode, init_model, truncate_embedding
from .evaluation import RetrievalTask, ndcg_at_k, retrieve
from .moe import ConfigError, LoadStats, load_balance_loss, moe_forward, route
from .objectives import infonce, infonce_hard, mrl_loss
from .trainer import TrainConfig, run_stage
from .upcycle import upcycle

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EncoderConfig",
    "EncoderModel",
    "LoadStats",
    "RetrievalTask",
    "Role",
    "TrainConfig",
    "Vocabulary",
    "encode",
    "infonce",
    "infonce_hard",
    "init_model",
    "load_balance_loss",
    "moe_forward",
    "mrl_loss",
    "ndcg_at_k",
    "retrieve",
    "route",
    "run_stage",
    "truncate_embedding",
    "upcycle",
]

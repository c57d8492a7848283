"""Mixture-of-experts language models with parameter-free self-routing."""

from ._core import (
    ConfigError,
    ContractError,
    Error,
    EvalResult,
    ExpertUsageStats,
    FormatError,
    GateKind,
    IoError,
    MetricsRecord,
    ModelConfig,
    NumericError,
    Placement,
    RangeError,
    RunConfig,
    ShapeError,
    StepMetrics,
    Trainer,
    TrainConfig,
    balance_loss,
    cli,
    count_params,
    detokenize,
    format_config,
    load_config,
    load_corpus,
    max_expert_fraction,
    merge,
    normalized_entropy,
    parse_config,
    router_param_count,
)

__all__ = [name for name in dir() if not name.startswith("_")]

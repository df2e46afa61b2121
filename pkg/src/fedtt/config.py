"""Run configuration: flat ``section.key = value`` text files.

Unknown keys are hard errors so typos cannot silently fall back to
defaults.  ``format_config`` emits every key of the resolved config and
``parse_config_text`` reads it back to an equal object.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import PARTITION_MODES
from .errors import ConfigError
from .fed import FedConfig
from .nn import ModelConfig
from .privacy import DPConfig

__all__ = [
    "ModelSettings",
    "DataSettings",
    "RunConfig",
    "parse_config",
    "parse_config_text",
    "format_config",
    "validate_config",
    "with_overrides",
]


@dataclass(frozen=True)
class ModelSettings:
    vocab_size: int = 32
    seq_len: int = 16
    d_model: int = 64
    blocks: int = 2
    heads: int = 2
    mlp_hidden: int = 128
    bottleneck: int = 16
    tt_rank: int = 5
    head_mode: str = "tensorized"
    adapter_bias: bool = True
    activation: str = "relu"
    backbone_seed: int = 7
    pretrain_steps: int = 300
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 32
    pretrain_per_class: int = 200

    def __post_init__(self) -> None:
        if self.pretrain_steps < 0:
            raise ValueError("model.pretrain_steps must be non-negative")
        if self.pretrain_lr <= 0:
            raise ValueError("model.pretrain_lr must be positive")
        if self.pretrain_batch < 1 or self.pretrain_per_class < 1:
            raise ValueError("model.pretrain_batch and model.pretrain_per_class must be positive")
        if self.backbone_seed < 0:
            raise ValueError("model.backbone_seed must be non-negative")

    def to_model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            seq_len=self.seq_len,
            d_model=self.d_model,
            num_blocks=self.blocks,
            num_heads=self.heads,
            mlp_hidden=self.mlp_hidden,
            num_classes=num_classes,
            bottleneck=self.bottleneck,
            tt_rank=self.tt_rank,
            head_mode=self.head_mode,
            adapter_bias=self.adapter_bias,
            activation=self.activation,
        )


@dataclass(frozen=True)
class DataSettings:
    classes: int = 2
    per_class: int = 400
    eval_per_class: int = 100
    partition: str = "iid"
    proportions: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ValueError("data.classes must be at least 2")
        if self.per_class < 1 or self.eval_per_class < 1:
            raise ValueError("data.per_class and data.eval_per_class must be positive")
        if self.partition not in PARTITION_MODES:
            raise ValueError(f"data.partition must be one of {PARTITION_MODES}")
        if self.proportions is not None and self.partition != "proportions":
            raise ValueError("data.proportions is only valid with data.partition = proportions")


@dataclass(frozen=True)
class RunConfig:
    model: ModelSettings = field(default_factory=ModelSettings)
    fed: FedConfig = field(default_factory=FedConfig)
    data: DataSettings = field(default_factory=DataSettings)
    dp: DPConfig = field(default_factory=DPConfig)
    seed: int = 0
    out: str = "out"


# key -> (section attr, field name, type tag); "" = top level
_SCHEMA: dict[str, tuple[str, str, str]] = {
    "model.vocab_size": ("model", "vocab_size", "int"),
    "model.seq_len": ("model", "seq_len", "int"),
    "model.d_model": ("model", "d_model", "int"),
    "model.blocks": ("model", "blocks", "int"),
    "model.heads": ("model", "heads", "int"),
    "model.mlp_hidden": ("model", "mlp_hidden", "int"),
    "model.bottleneck": ("model", "bottleneck", "int"),
    "model.tt_rank": ("model", "tt_rank", "int"),
    "model.head_mode": ("model", "head_mode", "str"),
    "model.adapter_bias": ("model", "adapter_bias", "bool"),
    "model.activation": ("model", "activation", "str"),
    "model.backbone_seed": ("model", "backbone_seed", "int"),
    "model.pretrain_steps": ("model", "pretrain_steps", "int"),
    "model.pretrain_lr": ("model", "pretrain_lr", "float"),
    "model.pretrain_batch": ("model", "pretrain_batch", "int"),
    "model.pretrain_per_class": ("model", "pretrain_per_class", "int"),
    "fed.num_clients": ("fed", "num_clients", "int"),
    "fed.clients_per_round": ("fed", "clients_per_round", "int"),
    "fed.local_updates": ("fed", "local_updates", "int"),
    "fed.rounds": ("fed", "rounds", "int"),
    "fed.algorithm": ("fed", "algorithm", "str"),
    "fed.lr": ("fed", "lr", "float"),
    "fed.batch_size": ("fed", "batch_size", "int"),
    "fed.weight_decay": ("fed", "weight_decay", "float"),
    "fed.workers": ("fed", "workers", "int"),
    "fed.reset_frozen_moments": ("fed", "reset_frozen_moments", "bool"),
    "fed.eval_batch": ("fed", "eval_batch", "int"),
    "data.classes": ("data", "classes", "int"),
    "data.per_class": ("data", "per_class", "int"),
    "data.eval_per_class": ("data", "eval_per_class", "int"),
    "data.partition": ("data", "partition", "str"),
    "data.proportions": ("data", "proportions", "matrix"),
    "dp.enabled": ("dp", "enabled", "bool"),
    "dp.clip": ("dp", "clip", "float"),
    "dp.sigma": ("dp", "sigma", "float"),
    "dp.epsilon": ("dp", "epsilon", "float"),
    "dp.delta": ("dp", "delta", "float"),
    "dp.c0": ("dp", "c0", "float"),
    "seed": ("", "seed", "int"),
    "out": ("", "out", "str"),
}


def _parse_value(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw, 10)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw == "true":
                return True
            if raw == "false":
                return False
            raise ValueError("expected true or false")
        if kind == "matrix":
            if raw == "":
                return None
            return tuple(
                tuple(float(cell) for cell in row.split(","))
                for row in raw.split(";")
            )
        return raw
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind} ({e})") from e


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind == "matrix":
        if value is None:
            return ""
        return ";".join(",".join(repr(float(c)) for c in row) for row in value)
    return str(value)


def parse_config_text(text: str) -> RunConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, _SCHEMA[key][2], val)
    return _build(values)


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    return parse_config_text(text)


def _build(values: dict[str, object]) -> RunConfig:
    by_section: dict[str, dict[str, object]] = {"model": {}, "fed": {}, "data": {}, "dp": {}, "": {}}
    for key, val in values.items():
        section, fname, _ = _SCHEMA[key]
        by_section[section][fname] = val
    try:
        cfg = RunConfig(
            model=ModelSettings(**by_section["model"]),
            fed=FedConfig(**by_section["fed"]),
            data=DataSettings(**by_section["data"]),
            dp=DPConfig(**by_section["dp"]),
            **by_section[""],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    """Cross-field checks that single sections cannot see."""
    try:
        mc = cfg.model.to_model_config(cfg.data.classes)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if cfg.fed.algorithm == "fedtt_plus" and mc.adapter_chain_length < 3:
        raise ConfigError(
            "fed.algorithm = fedtt_plus needs adapter chains of length >= 3; "
            f"model.bottleneck = {cfg.model.bottleneck} and model.d_model = "
            f"{cfg.model.d_model} give chains of length {mc.adapter_chain_length}"
        )
    if cfg.data.partition == "proportions":
        if cfg.data.proportions is None:
            raise ConfigError("data.partition = proportions requires data.proportions")
        if len(cfg.data.proportions) != cfg.fed.num_clients:
            raise ConfigError(
                f"data.proportions has {len(cfg.data.proportions)} rows for "
                f"{cfg.fed.num_clients} clients"
            )
        for i, row in enumerate(cfg.data.proportions):
            if len(row) != cfg.data.classes:
                raise ConfigError(
                    f"data.proportions row {i} has {len(row)} entries for "
                    f"{cfg.data.classes} classes"
                )
    train_total = cfg.data.classes * cfg.data.per_class
    if train_total < cfg.fed.num_clients:
        raise ConfigError(
            f"{train_total} training sequences cannot cover {cfg.fed.num_clients} clients"
        )


def format_config(cfg: RunConfig) -> str:
    """Emit every key of the resolved config, one per line, in schema order."""
    lines = []
    for key, (section, fname, kind) in _SCHEMA.items():
        obj = cfg if section == "" else getattr(cfg, section)
        lines.append(f"{key} = {_format_value(kind, getattr(obj, fname))}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, seed=None, out=None, workers=None) -> RunConfig:
    """CLI-level overrides; None leaves the field untouched."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, out=out)
    if workers is not None:
        try:
            cfg = replace(cfg, fed=replace(cfg.fed, workers=workers))
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return cfg

"""Run configuration: typed defaults, TOML file loading, MOTOR_* environment
overrides, validation, and a resolved-config echo written next to outputs.

Precedence (low to high): dataclass defaults, config file, environment
variables, explicit CLI overrides.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:               # python < 3.11
    import tomli as tomllib

from .corpus import LABEL_NAMES
from .injection import VARIANTS
from .model import ModelDims

ENV_PREFIX = "MOTOR_"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model dimensions (desk-scale defaults)
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    image_size: int = 64
    patch_size: int = 8
    proj_dim: int = 32
    max_text_len: int = 64
    dropout: float = 0.0
    tie_knowledge_encoders: bool = False

    # knowledge pipeline
    variant: str = "full"                 # plain|graph|triplet|both|full
    graph_file: str = ""                  # empty -> packaged default graph
    k_retrieve: int = 3
    triplet_cap: int = 32
    triplet_text_len: int = 90
    exclude_self_retrieval: bool = True
    warmup_steps: int = 200
    mlc_normalized: bool = True

    # queues and momentum
    itc_queue_size: int = 256
    report_queue_size: int = 512          # the paper-scale value would be 65536
    momentum: float = 0.995

    # objectives
    weight_itm: float = 1.0
    weight_lm: float = 1.0
    weight_mlc: float = 1.0
    label_smoothing: float = 0.1
    itc_soft_targets: bool = False

    # optimization
    batch_size: int = 32
    steps: int = 2000
    lr: float = 1e-4
    weight_decay: float = 0.02
    seed: int = 0
    checkpoint_every: int = 1000

    # finetuning step sizes
    lr_retrieval: float = 5e-5
    lr_generation: float = 1e-5
    lr_classification: float = 1e-5
    lr_vqa: float = 5e-3
    finetune_steps: int = 400

    # evaluation
    rerank_top_m: int = 16
    beam_width: int = 1
    gen_max_len: int = 64
    classify_on_fused: bool = False       # heads on image encoder by default
    vqa_use_knowledge: bool = True

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        for name in ("k_retrieve", "triplet_cap", "triplet_text_len", "batch_size",
                     "steps", "itc_queue_size", "report_queue_size", "proj_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("weight_itm", "weight_lm", "weight_mlc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.batch_size > self.itc_queue_size:
            raise ConfigError("batch_size must not exceed itc_queue_size")
        return self

    @property
    def label_names(self) -> tuple[str, ...]:
        return LABEL_NAMES

    def dims(self) -> ModelDims:
        return ModelDims(
            d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            ffn_mult=self.ffn_mult, image_size=self.image_size,
            patch_size=self.patch_size, proj_dim=self.proj_dim,
            max_text_len=self.max_text_len, dropout=self.dropout,
            tie_knowledge_encoders=self.tie_knowledge_encoders)

    @classmethod
    def tiny(cls, **overrides) -> "RunConfig":
        """Reduced profile sized for single-core CPU runs."""
        base = dict(d_model=48, patch_size=16, max_text_len=48, batch_size=16,
                    itc_queue_size=128, warmup_steps=100)
        base.update(overrides)
        return cls(**base).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, kind: type, value):
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "1", "yes"):
            return True
        if isinstance(value, str) and value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: cannot read {value!r} as bool")
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot read {value!r} as {kind.__name__}") from exc


def load_config(path: str | Path | None = None, env: dict | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Build a validated RunConfig from file, environment, and overrides.

    Unknown keys in the file or the overrides are rejected.
    """
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    values: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        for key, val in data.items():
            if key not in known:
                raise ConfigError(f"{path}: unknown config key {key!r}")
            values[key] = _coerce(key, types[key], val)
    env = os.environ if env is None else env
    for key in known:
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            values[key] = _coerce(key, types[key], env[env_key])
    for key, val in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if val is not None:
            values[key] = _coerce(key, types[key], val)
    return RunConfig(**values).validate()


def echo_config(cfg: RunConfig, path: str | Path) -> None:
    """Write the fully resolved configuration as TOML."""
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            rendered = "true" if v else "false"
        elif isinstance(v, str):
            rendered = f'"{v}"'
        else:
            rendered = repr(v)
        lines.append(f"{f.name} = {rendered}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig

DEFAULT_SEEDS = (82, 23, 37, 84, 4)


class ConfigParseError(ValueError):
    pass


@dataclass
class TrainConfig:
    # model
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    max_seq_len: int = 96
    tie_embeddings: bool = False
    # task
    task: str = "pattern"
    n_train: int = 800
    n_test: int = 200
    suffix_ratio: float = 8.0
    min_clauses: int = 2
    max_clauses: int = 3
    payload_len: int = 8
    data_seed: int = 0
    instruction: bool = False
    # auxiliary loss
    variant: str = "STP"
    lam: float = 0.02
    warmup_steps: int = 0
    pred_target: str = "tr"
    skip_instruction: bool = False
    # optimization
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 20
    seed: int = 82
    fraction: int = 1
    half_compute: bool = False
    max_step_multiplier: int = 64
    # reporting
    out_dir: str = ""
    eval_batch: int = 100
    p1_ntp_range: float = 0.05
    p1_stp_drop: float = 0.05
    tau: int = 8
    seeds: tuple = field(default=DEFAULT_SEEDS)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            self.vocab_size, self.d_model, self.n_layers, self.n_heads,
            self.d_ff, self.max_seq_len, self.tie_embeddings,
        ).validate()

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# external key -> field name
ALIASES = {"lambda": "lam"}


def _field_types() -> dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}
    return {f.name: hints[f.type] for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str, kind: type, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigParseError(f"{where}: cannot parse {key} = {raw!r} as {kind.__name__}") from None


def apply_overrides(cfg: TrainConfig, pairs, where: str = "override") -> TrainConfig:
    """Apply (key, raw value) pairs; unknown keys are errors."""
    types = _field_types()
    updates = {}
    for i, (key, raw) in enumerate(pairs, 1):
        name = ALIASES.get(key.strip(), key.strip())
        if name not in types:
            raise ConfigParseError(f"{where} {i}: unknown key {key.strip()!r}")
        updates[name] = _coerce(key.strip(), raw, types[name], f"{where} {i}")
    return cfg.replace(**updates)


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    types = _field_types()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigParseError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in body.split("=", 1))
        name = ALIASES.get(key, key)
        if name not in types:
            raise ConfigParseError(f"{source}:{lineno}: unknown key {key!r}")
        updates[name] = _coerce(key, raw, types[name], f"{source}:{lineno}")
    return TrainConfig().replace(**updates)


def parse_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), str(path))

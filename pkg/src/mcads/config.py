"""Declarative run configuration: JSON file plus dotted --set overrides.

The dataclass tree mirrors the JSON shape. Unknown keys anywhere are
rejected with their full path. Defaults are the full-scale training
settings (Adam lr 1e-4, batch 8, 256/128 patches, 64..512 filters);
RunConfig.desk() shrinks everything to laptop scale.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .blocks import BlockConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .network import ModelConfig


class ConfigError(ValueError):
    """Unparseable config, unknown key, or malformed override."""


@dataclass
class TrainSettings:
    lr: float = 1e-4
    batch: int = 8
    epochs: int = 1
    seed: int = 0
    val_fraction: float = 0.2
    augment: bool = True
    checkpoint_dir: str = "checkpoints"
    checkpoint_interval: int = 0  # extra snapshot every k epochs; 0 = off


@dataclass
class DataSettings:
    root: str = ""  # dataset directory; empty selects the synthetic set
    synth_n: int = 8
    synth_hw: int = 64
    synth_seed: int = 8
    patch: int = 256
    stride: int = 128


@dataclass
class EvalSettings:
    threshold: float = 0.5
    out_dir: str = "predictions"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @staticmethod
    def desk() -> "RunConfig":
        """Laptop-scale preset used by the demos and regression runs.

        Narrow filters, one attention pass per fusion, and a faster BN
        running-stat horizon; small datasets drift too quickly for the
        full-scale momentum.
        """
        cfg = RunConfig()
        cfg.model.encoder.stage_filters = (8, 16, 32, 64, 64, 64)
        cfg.model.decoder.rlab_iterations = (1, 1, 1, 1, 1)
        cfg.model.block.attention_token_cap = 256
        cfg.model.block.bn_momentum = 0.85
        cfg.train.batch = 4
        cfg.data.patch = 64
        cfg.data.stride = 32
        return cfg


_NESTED = {
    RunConfig: {"model": ModelConfig, "train": TrainSettings,
                "data": DataSettings, "eval": EvalSettings},
    ModelConfig: {"encoder": EncoderConfig, "decoder": DecoderConfig,
                  "block": BlockConfig},
}


def _apply_dict(obj, data: dict, path: str):
    """Assign `data` onto dataclass `obj`, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key '{where}'")
        nested = _NESTED.get(type(obj), {}).get(key)
        if nested is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be an object")
            _apply_dict(getattr(obj, key), value, where)
            continue
        current = getattr(obj, key)
        if isinstance(current, tuple) and isinstance(value, (list, tuple)):
            value = tuple(value)
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"'{where}' must be true/false")
        if isinstance(current, dict) and isinstance(value, dict):
            bad = set(value) - set(current)
            if bad:
                raise ConfigError(f"unknown config key "
                                  f"'{where}.{sorted(bad)[0]}'")
            value = {**current, **value}
        setattr(obj, key, value)


def _parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override '{item}' has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings may be given unquoted
    return key, value


def load_config(path: str | None = None, overrides=(),
                base: RunConfig | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus --set overrides."""
    cfg = base if base is not None else RunConfig()
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _apply_dict(cfg, data, "")
    for item in overrides:
        key, value = _parse_override(item)
        tree: dict = {}
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        _apply_dict(cfg, tree, "")
    return cfg

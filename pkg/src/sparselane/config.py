"""Run configuration: nested dataclasses, YAML files, dotted overrides.

Every key has a default; unknown keys are rejected with the offending path.
The fully resolved config is echoed into every artifact a run produces.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from .losses import LossConfig
from .metrics import EvalConfig
from .network.decoder import ModelConfig
from .synthetic import BoxRange, SceneConfig
from .temporal import FusionConfig

SPEC_VERSION = "0.1.0"


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4


@dataclass
class TrainConfig:
    max_steps: int | None = None  # caps epochs * steps_per_epoch when set
    log_every: int = 10
    checkpoint_every: int = 500
    clip_len: int = 2  # frames per training clip when fusion is enabled


@dataclass
class DataConfig:
    dataset_path: str | None = None  # load from disk when set, else generate
    sequences: int = 20
    frames_per_sequence: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    epochs: int = 50
    batch_size: int = 2
    seed: int = 0
    out_dir: str = "runs/default"


def _coerce(hint, value, path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping for {hint.__name__}")
        return dataclass_from_dict(hint, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]")
                     for i, (a, v) in enumerate(zip(args, value)))
    if hint is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def dataclass_from_dict(cls, data: dict, path: str = "") -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            full = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {full}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            sub = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], sub)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_overrides(pairs: list[str]) -> dict:
    """Turn ['fusion.variant=topk_query', 'seed=3'] into a nested dict."""
    tree: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} conflicts with an earlier scalar")
        node[parts[-1]] = value
    return tree


def load_config(path: str | None = None, overrides: list[str] | None = None,
                extra: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional YAML file plus CLI overrides."""
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = loaded
    if extra:
        data = _merge(data, extra)
    if overrides:
        data = _merge(data, parse_overrides(overrides))
    return dataclass_from_dict(RunConfig, data)


def diff_config_dicts(a: dict, b: dict, path: str = "") -> list[str]:
    """Paths whose values differ between two config echoes."""
    keys = sorted(set(a) | set(b))
    out = []
    for k in keys:
        sub = f"{path}.{k}" if path else k
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(diff_config_dicts(va, vb, sub))
        else:
            na = list(va) if isinstance(va, (list, tuple)) else va
            nb = list(vb) if isinstance(vb, (list, tuple)) else vb
            if na != nb:
                out.append(sub)
    return out

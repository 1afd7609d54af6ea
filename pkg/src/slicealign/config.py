"""Experiment configuration: YAML file + ``--set key=value`` overrides."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .augment import AugmentConfig
from .losses import LossConfig
from .model import ModelConfig
from .pairing import PairingConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup_steps: int = 0


@dataclass(frozen=True)
class PretrainSchedule:
    epochs: int = 10
    iters_per_epoch: Optional[int] = None  # None: total slices / n
    optim: OptimConfig = OptimConfig(lr=1e-3)


@dataclass(frozen=True)
class FinetuneSchedule:
    steps: int = 200
    batch_size: int = 8
    flip_prob: float = 0.5
    optim: OptimConfig = OptimConfig(lr=1e-4)


@dataclass(frozen=True)
class EvalConfig:
    k: int = 5
    Ms: tuple = (2,)
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    pairing: PairingConfig = PairingConfig()
    augment: AugmentConfig = AugmentConfig()
    loss: LossConfig = LossConfig()
    model: ModelConfig = ModelConfig()
    pretrain: PretrainSchedule = PretrainSchedule()
    finetune: FinetuneSchedule = FinetuneSchedule()
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    num_workers: int = 0

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ExperimentConfig":
        return _build(cls, d or {}, "")

    def replace(self, **overrides: str) -> "ExperimentConfig":
        return apply_overrides(self, [f"{k}={v}" for k, v in overrides.items()])


# YAML key <-> dataclass field, where Python reserves the name
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


def validate(cfg: ExperimentConfig) -> None:
    m, a, lc = cfg.model, cfg.augment, cfg.loss
    stride_max = 2 ** (m.stages - 1)
    H, W = a.output_size
    if H % stride_max or W % stride_max:
        raise ConfigError(f"augment.output_size {a.output_size} must be divisible by 2^(stages-1)={stride_max}")
    if not 1 <= lc.s <= m.stages:
        raise ConfigError(f"loss.s={lc.s} outside [1, model.stages={m.stages}]")
    stride = 2 ** (lc.s - 1)
    h, w = H // stride, W // stride
    if h % lc.omega or w % lc.omega:
        raise ConfigError(
            f"loss.omega={lc.omega} does not divide the {h}x{w} feature grid "
            f"(input {H}x{W} at scale s={lc.s}, stride {stride})"
        )
    if cfg.finetune.batch_size < 1 or cfg.finetune.steps < 0 or cfg.pretrain.epochs < 0:
        raise ConfigError("schedule values must be nonnegative (batch_size >= 1)")
    if cfg.eval.k < 2:
        raise ConfigError(f"eval.k must be >= 2, got {cfg.eval.k}")


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {_REVERSE.get(f.name, f.name): to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where + ".")
    return value


def _build(cls, d: dict, prefix: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in d.items():
        name = _ALIASES.get(key, key)
        where = f"{prefix}{key}"
        if name not in fields:
            raise ConfigError(f"unknown config key {where!r}")
        tp = hints[name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = _coerce(tp, value, where)
        if not dataclasses.is_dataclass(tp):
            kwargs[name] = _cast_scalar(tp, kwargs[name], where)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def _cast_scalar(tp, value, where):
    if value is None:
        return None
    if typing.get_origin(tp) is typing.Union:
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    if tp is float:
        if isinstance(value, str):  # YAML 1.1 reads "3e-4" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if tp is str and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    d = cfg.to_dict()
    for item in overrides or []:
        path, value = parse_override(item)
        node = d
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key {'.'.join(path)!r}")
            node = node[part]
        if path[-1] not in node:
            raise ConfigError(f"unknown config key {'.'.join(path)!r}")
        node[path[-1]] = value
    return ExperimentConfig.from_dict(d)


def load_config(path: Optional[str | Path] = None, overrides=None) -> ExperimentConfig:
    d = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        d = yaml.safe_load(path.read_text()) or {}
    cfg = ExperimentConfig.from_dict(d)
    if "SAL_NUM_WORKERS" in os.environ:
        cfg = apply_overrides(cfg, [f"num_workers={int(os.environ['SAL_NUM_WORKERS'])}"])
    return apply_overrides(cfg, overrides)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path

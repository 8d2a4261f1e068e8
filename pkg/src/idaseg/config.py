"""Run configuration: defaults, validation, and layered resolution.

Precedence when resolving a config is file < environment < CLI flags.
Environment variables use the ``IDA_`` prefix with the upper-cased field
name, e.g. ``IDA_LR=1e-4`` or ``IDA_M=96``. Config files are flat JSON
objects whose keys mirror the RunConfig field names.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

ENV_PREFIX = "IDA_"

TRANSLATION_STRATEGIES = (
    "s2t_cut",
    "t2s_cut",
    "s2t_class",
    "t2s_class",
    "bi_cut",
    "bi_class",
    "bat_cut_class",
    "bat_class_cut",
)
INPUT_MODES = ("both", "patch", "whole")
CL_MODES = ("idcl", "vanilla", "dcl")
PRETRAIN_STRATEGIES = ("random", "self_cut", "vcl", "self_cut+vcl")
LR_SCHEDULES = ("constant", "poly")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration. CLI exit code 2."""


class NumericError(RuntimeError):
    """Non-finite values encountered during training. CLI exit code 3."""


@dataclass
class RunConfig:
    """All hyperparameters of one run, including ablation toggles.

    Serialized with every run manifest and checkpoint so a run can be
    reproduced from its artifacts alone.
    """

    # optimization
    lr: float = 2.5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 5e-4
    lr_schedule: str = "constant"
    batch_size: int = 4
    iterations: int = 4000
    pretrain_iterations: int = 2000
    ema_momentum: float = 0.99

    # intermediate-image mixing
    m: int = 128
    strategy: str = "bat_class_cut"
    input_mode: str = "both"

    # prototype contrastive learning
    th_t2s: float = 0.9
    th_s2t: float = 0.7
    delta: float = 0.1
    tau: float = 1.0
    cl_mode: str = "idcl"

    # loss weights
    beta1: float = 1.0
    beta2: float = 1.0
    gamma: float = 1.0

    # component toggles
    self_training: bool = True
    mrat: bool = True
    idcl: bool = True
    pretrain_strategy: str = "self_cut+vcl"

    # network
    depth: int = 4
    base_channels: int = 16
    num_classes: int = 2

    # data
    train_size: int = 384
    eval_size: int = 384
    hflip: bool = True
    vflip: bool = True
    jitter: bool = True

    # bookkeeping
    seed: int = 0
    determinism: bool = True
    eval_every: int = 500
    checkpoint_every: int = 1000
    device: str = "cpu"

    def validate(self) -> "RunConfig":
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError(
                f"batch_size must be even and >= 2 (two half-batch streams), got {self.batch_size}"
            )
        if not 0 < self.m < self.train_size:
            raise ConfigError(f"m must satisfy 0 < m < train_size, got m={self.m}")
        if self.strategy not in TRANSLATION_STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")
        if self.cl_mode not in CL_MODES:
            raise ConfigError(f"unknown cl_mode {self.cl_mode!r}")
        if self.pretrain_strategy not in PRETRAIN_STRATEGIES:
            raise ConfigError(f"unknown pretrain_strategy {self.pretrain_strategy!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        for name in ("th_t2s", "th_s2t"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.delta < 1.5707963267948966:
            raise ConfigError(f"delta must be in [0, pi/2), got {self.delta}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError(f"ema_momentum must be in [0, 1], got {self.ema_momentum}")
        for name in ("beta1", "beta2", "gamma", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        stride = 2 ** (self.depth - 1)
        for name in ("train_size", "eval_size"):
            v = getattr(self, name)
            if v <= 0 or v % stride != 0:
                raise ConfigError(
                    f"{name}={v} must be a positive multiple of 2^(depth-1)={stride}"
                )
        return self

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], value)
        return cls(**kwargs)


def _coerce(f: dataclasses.Field, value: Any) -> Any:
    """Coerce a raw (file/env/flag) value to the field's declared type."""
    if f.name == "betas":
        if isinstance(value, str):
            value = [float(p) for p in value.split(",")]
        pair = tuple(float(v) for v in value)
        if len(pair) != 2:
            raise ConfigError(f"betas needs exactly two values, got {value!r}")
        return pair
    if f.type in ("bool", bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean for {f.name}: {value!r}")
    if f.type in ("int", int):
        return int(value)
    if f.type in ("float", float):
        return float(value)
    return str(value)


def resolve_config(
    config_file: str | os.PathLike | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Build a RunConfig with precedence file < environment < overrides.

    ``overrides`` holds explicitly-set CLI flags only; fields absent from
    every layer keep their defaults.
    """
    merged: dict[str, Any] = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a flat JSON object")
        merged.update(loaded)
    env = os.environ if env is None else env
    field_names = {f.name for f in dataclasses.fields(RunConfig)}
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name in field_names:
            merged[name] = value
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(merged).validate()

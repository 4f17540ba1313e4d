"""Experiment configuration: nested dataclasses with YAML round-tripping.

A resolved config has every default inlined and every ``None`` sub-seed
replaced by the top-level seed, so an archived run directory is
self-describing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .core import ConfigError
from .dualgrpo import RLConfig, Variant
from .synthenv import EnvConfig


@dataclass(frozen=True)
class PolicyConfig:
    hidden: int = 64
    horizon: int = 1

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError("policy.hidden must be positive")
        if self.horizon < 1:
            raise ConfigError("policy.horizon must be positive")


@dataclass(frozen=True)
class WarmupConfig:
    train_count: int = 1000
    probe_epochs: int = 8
    probe_lr: float = 2.0
    k: int = 64
    epochs: int = 300
    lr: float = 2.0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.train_count < 1:
            raise ConfigError("warmup.train_count must be >= 1")
        if self.k < 1:
            raise ConfigError("warmup.k must be >= 1")
        if self.epochs < 0 or self.probe_epochs < 0:
            raise ConfigError("warmup.epochs and warmup.probe_epochs must be >= 0")
        if self.lr <= 0 or self.probe_lr <= 0:
            raise ConfigError("warmup.lr and warmup.probe_lr must be positive")


@dataclass(frozen=True)
class EvalConfig:
    count: int = 2000
    samples_per_instance: int = 1
    temperature: float = 0.6
    ratios: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    sweep_count: int = 2000
    baseline_epochs: int = 500
    baseline_lr: float = 2.0
    top_k: int = 10
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.count < 1 or self.sweep_count < 1:
            raise ConfigError("eval.count and eval.sweep_count must be >= 1")
        if self.samples_per_instance < 1:
            raise ConfigError("eval.samples_per_instance must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("eval.temperature must be positive")
        if any(not 0.0 <= r <= 1.0 for r in self.ratios):
            raise ConfigError("eval.ratios must lie in [0, 1]")
        if self.baseline_epochs < 0 or self.baseline_lr <= 0:
            raise ConfigError("eval.baseline_epochs must be >= 0 and eval.baseline_lr positive")
        if self.top_k < 1:
            raise ConfigError("eval.top_k must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run_name: str = "run"
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if not self.run_name or "/" in self.run_name:
            raise ConfigError(f"run_name must be a non-empty name without '/', got {self.run_name!r}")

    def resolved(self) -> "ExperimentConfig":
        """Fill unset sub-seeds from the top-level seed."""
        def fill(section):
            return section if section.seed is not None else replace(section, seed=self.seed)
        return replace(self, env=fill(self.env), warmup=fill(self.warmup), rl=fill(self.rl),
                       eval=fill(self.eval))

    def with_overrides(self, seed: Optional[int] = None, variant: Optional[str] = None):
        cfg = self
        if seed is not None:
            # an explicit seed re-derives every sub-seed
            cfg = replace(cfg, seed=int(seed), env=replace(cfg.env, seed=None),
                          warmup=replace(cfg.warmup, seed=None), rl=replace(cfg.rl, seed=None),
                          eval=replace(cfg.eval, seed=None))
        if variant is not None:
            cfg = replace(cfg, rl=replace(cfg.rl, variant=_variant(variant)))
        return cfg

    def to_dict(self) -> dict:
        return {
            "run_name": self.run_name,
            "seed": self.seed,
            "env": _section_dict(self.env),
            "policy": _section_dict(self.policy),
            "warmup": _section_dict(self.warmup),
            "rl": _section_dict(self.rl),
            "eval": _section_dict(self.eval),
        }


_SECTIONS = {
    "env": EnvConfig,
    "policy": PolicyConfig,
    "warmup": WarmupConfig,
    "rl": RLConfig,
    "eval": EvalConfig,
}


def _variant(name) -> Variant:
    try:
        return Variant(name)
    except ValueError:
        choices = ", ".join(v.value for v in Variant)
        raise ConfigError(f"rl.variant must be one of {choices}, got {name!r}") from None


def _plain(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _section_dict(section) -> dict:
    return {f.name: _plain(getattr(section, f.name)) for f in fields(section)}


def _build_section(name: str, cls, raw) -> object:
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config field {name}.{key}")
    kwargs = dict(raw)
    if name == "rl" and "variant" in kwargs:
        kwargs["variant"] = _variant(kwargs["variant"])
    if name == "env" and "mix" in kwargs:
        kwargs["mix"] = tuple(kwargs["mix"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {name}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    allowed = set(_SECTIONS) | {"run_name", "seed"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown config field {key}")
    sections = {name: _build_section(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    top = {k: raw[k] for k in ("run_name", "seed") if k in raw}
    return ExperimentConfig(**sections, **top)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(raw)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8", newline="\n")

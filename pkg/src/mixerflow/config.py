"""Run configuration and the ``key = value`` config-file format."""
from __future__ import annotations

import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import MixerFlowConfig


@dataclass
class RunConfig:
    model: MixerFlowConfig = field(default_factory=MixerFlowConfig)
    dataset: str = "mnist"             # mnist | cifar10 | imagedir
    data_dir: str = ""
    resolution: int = 32               # imagedir only
    batch_size: int = 128
    steps: int = 1000
    lr: float = 1e-3
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 5.0
    shuffle: str = "none"              # none | local | global
    shuffle_seed: int = 0
    eval_seed: int = 1234
    log_every: int = 10
    eval_every: int = 0                # 0: only at the end
    checkpoint_every: int = 0
    out_dir: str = "runs/default"

    @property
    def seed(self) -> int:
        return self.model.seed

    def validate(self) -> None:
        self.model.validate()
        if self.dataset not in ("mnist", "cifar10", "imagedir"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.shuffle not in ("none", "local", "global"):
            raise ConfigError(f"shuffle must be none, local or global, got {self.shuffle!r}")
        if self.batch_size < 1 or self.steps < 0 or self.log_every < 1:
            raise ConfigError("batch_size and log_every must be >= 1, steps >= 0")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive")

    # -- flat key/value view ---------------------------------------------------------
    def to_items(self) -> list[tuple[str, object]]:
        items = [(f.name, getattr(self.model, f.name)) for f in fields(MixerFlowConfig)]
        items += [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "model"]
        return items

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "RunConfig":
        model_fields = {f.name: f for f in fields(MixerFlowConfig)}
        run_fields = {f.name: f for f in fields(cls) if f.name != "model"}
        model_kw, run_kw = {}, {}
        for key, raw in items.items():
            if key in model_fields:
                model_kw[key] = _coerce(raw, model_fields[key], MixerFlowConfig)
            elif key in run_fields:
                run_kw[key] = _coerce(raw, run_fields[key], cls)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(model=MixerFlowConfig(**model_kw), **run_kw)
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_items())

    def replace(self, **overrides) -> "RunConfig":
        items = {k: format_value(v) for k, v in self.to_items()}
        items.update({k: format_value(v) for k, v in overrides.items()})
        return RunConfig.from_items(items)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, f, owner):
    hint = typing.get_type_hints(owner)[f.name]
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from None


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; duplicate keys are errors."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str | os.PathLike) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    return RunConfig.from_items(parse_kv(text, str(path)))

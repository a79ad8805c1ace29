"""Flat ``key = value`` training configuration files.

Blank lines and ``#`` comments are ignored. Recognised keys mirror
:class:`TrainConfig` and :class:`CaeArchitecture`, plus the dataset
sampling options ``patches`` and ``dataset_seed``::

    filters = 8,8,16,16,16,8
    patch_size = 32
    lambda = 1.0
    max_iterations = 2000
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .network import CaeArchitecture, TrainConfig

_ALIASES = {"lambda": "lam", "mu_halfwidth": "noise_halfwidth", "lr": "learning_rate"}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    architecture: CaeArchitecture = field(default_factory=CaeArchitecture)
    patches: int = 1000
    dataset_seed: int = 0


def _number(key, text, kind):
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    train, arch, extra = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key in _TRAIN_KEYS:
            kind = float if _TRAIN_KEYS[key] in ("float", float) else int
            train[key] = _number(key, value, kind)
        elif key == "filters":
            arch["filter_counts"] = tuple(_number(key, v, int) for v in value.split(","))
        elif key == "patch_size":
            arch["patch_size"] = _number(key, value, int)
        elif key in ("patches", "dataset_seed"):
            extra[key] = _number(key, value, int)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    try:
        return RunConfig(TrainConfig(**train), CaeArchitecture(**arch), **extra)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))

"""Flat ``section.key = value`` configuration files.

Sections map onto dataclasses: ``train`` (:class:`TrainConfig` itself),
``model``, ``loss``, ``perturb`` and ``data``. Ranges are written as two
comma-separated numbers, e.g. ``perturb.brightness = 0.6, 1.4``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .perturb import PerturbRanges
from .segnet import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    warmup_iters: int = 150
    weight_decay: float = 0.01
    seed: int = 0
    perturb: bool = True
    cons: bool = True
    contra: bool = True
    seg_on_aug: bool = True
    checkpoint_dir: str = "runs/default"
    checkpoint_every: int = 0
    log_every: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    ranges: PerturbRanges = field(default_factory=PerturbRanges)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"train.batch_size must be >= 2, got {self.batch_size}")
        if self.iterations < 0 or not 0 <= self.warmup_iters:
            raise ConfigError("train.iterations and train.warmup_iters must be >= 0")
        if self.warmup_iters > self.iterations and self.iterations > 0:
            raise ConfigError(f"train.warmup_iters={self.warmup_iters} exceeds train.iterations={self.iterations}")
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if (self.cons or self.contra) and not self.perturb:
            raise ConfigError("train.cons and train.contra need train.perturb (they compare x with x')")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


SECTIONS = {"model": "model", "loss": "loss", "perturb": "ranges", "data": "data"}


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if typing.get_origin(kind) is tuple:
            parts = [float(p) for p in raw.replace("(", "").replace(")", "").split(",")]
            if len(parts) != 2:
                raise ValueError(raw)
            return tuple(parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    raise ConfigError(f"{key}: unsupported type {kind}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_flat(cfg: TrainConfig) -> dict[str, str]:
    flat = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            section = next(s for s, attr in SECTIONS.items() if attr == f.name)
            for sub in dataclasses.fields(value):
                flat[f"{section}.{sub.name}"] = _format_value(getattr(value, sub.name))
        else:
            flat[f"train.{f.name}"] = _format_value(value)
    return flat


def from_flat(flat: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    top: dict = {}
    nested: dict[str, dict] = {attr: {} for attr in SECTIONS.values()}
    top_hints = _hints(TrainConfig)
    for key, raw in flat.items():
        section, _, name = key.partition(".")
        if section == "train" and name in top_hints and name not in SECTIONS.values():
            top[name] = _parse_value(raw, top_hints[name], key)
        elif section in SECTIONS:
            attr = SECTIONS[section]
            hints = _hints(type(getattr(base, attr)))
            if name not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            nested[attr][name] = _parse_value(raw, hints[name], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        for attr, changes in nested.items():
            if changes:
                top[attr] = dataclasses.replace(getattr(base, attr), **changes)
        return dataclasses.replace(base, **top)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    flat = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        flat[key.strip()] = value.strip()
    return flat


def load_config(path: str | Path | None = None, overrides: typing.Sequence[str] = ()) -> TrainConfig:
    flat = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        flat.update(parse_lines(path.read_text().splitlines(), str(path)))
    flat.update(parse_lines(overrides, "--override"))
    return from_flat(flat)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


def model_hash(model_cfg: ModelConfig) -> str:
    """Hash of the architecture; checkpoints refuse to load into a different one."""
    payload = json.dumps(dataclasses.asdict(model_cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]

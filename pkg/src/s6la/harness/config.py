"""Run configuration in a flat ``key = value`` text format.

Keys are dotted (``optimizer.lr``). Blank lines and ``#`` comments are
ignored; list values are comma separated. Precedence, lowest first:
built-in defaults, the config file, ``--set KEY=VALUE`` overrides, then the
dedicated ``--seed``/``--dtype`` flags.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

log = logging.getLogger(__name__)

BACKBONES = ("cnn", "vit")
AGGREGATIONS = ("none", "rla", "s6la")
DATASET_KINDS = ("synthetic_moons", "synthetic_spiral", "idx_images", "csv_table")


class ConfigError(ValueError):
    pass


@dataclass
class Ablations:
    trainable_h: bool = True
    selective: bool = True
    vit_combine: str = "multiply"
    cnn_pool_delta: str = "per_position"


@dataclass
class OptimizerSpec:
    kind: str = "sgd_momentum"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 200
    batch: int = 64
    lr_drops: tuple = (100, 150)


@dataclass
class DatasetSpec:
    kind: str = "synthetic_spiral"
    path: str = ""
    labels_path: str = ""
    classes: int = 3
    image_size: int = 0
    points: int = 1500
    noise: float = 0.1
    test_fraction: float = 0.2


@dataclass
class ModelSpec:
    width: int = 16
    blocks: tuple = (8,)
    mid: int = 0
    grid: int = 2
    depth: int = 4
    patch: int = 4


@dataclass
class MetricsSpec:
    wall_clock: bool = True


@dataclass
class RunConfig:
    backbone: str = "cnn"
    aggregation: str = "s6la"
    latent_n: int = 32
    seed: int = 0
    dtype: int = 64
    ablations: Ablations = field(default_factory=Ablations)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    metrics: MetricsSpec = field(default_factory=MetricsSpec)

    # -- serialization -----------------------------------------------------

    def items(self) -> Iterable[tuple[str, Any]]:
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for sub in fields(v):
                    yield f"{f.name}.{sub.name}", getattr(v, sub.name)
            else:
                yield f.name, v

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def hash(self) -> str:
        """Digest of every setting except the seed."""
        text = "".join(f"{k} = {_format(v)}\n" for k, v in self.items() if k != "seed")
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def run_name(self) -> str:
        return f"{self.hash()}-s{self.seed}"

    # -- construction ------------------------------------------------------

    def set(self, key: str, value: str) -> None:
        target: Any = self
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
                raise ConfigError(f"unknown config section {part!r} in {key!r}")
            target = getattr(target, part)
        name = parts[-1]
        types = {f.name: f for f in fields(target)}
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{key!r} is a section, not a value")
        setattr(target, name, _parse(value, current, key))

    def update(self, pairs: dict[str, str]) -> "RunConfig":
        for k, v in pairs.items():
            self.set(k, v)
        return self

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().update(parse_pairs(text))

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, str] | None = None) -> "RunConfig":
        cfg = cls.from_text(Path(path).read_text())
        if overrides:
            cfg.update(overrides)
        return cfg

    def validate(self) -> "RunConfig":
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.backbone == "vit" and self.aggregation == "rla":
            raise ConfigError("rla aggregation is only defined for the cnn backbone")
        if self.dtype not in (32, 64):
            raise ConfigError("dtype must be 32 or 64")
        if self.latent_n < 1:
            raise ConfigError("latent_n must be positive")
        if self.latent_n not in (16, 32, 64):
            log.warning("latent_n=%d is outside the ablation grid {16, 32, 64}", self.latent_n)
        ab = self.ablations
        if ab.vit_combine not in ("multiply", "concat"):
            raise ConfigError("ablations.vit_combine must be multiply or concat")
        if ab.cnn_pool_delta not in ("per_position", "global"):
            raise ConfigError("ablations.cnn_pool_delta must be per_position or global")
        if self.backbone == "cnn" and ab.vit_combine != "multiply":
            raise ConfigError("ablations.vit_combine does not apply to the cnn backbone")
        if self.backbone == "vit" and ab.cnn_pool_delta != "per_position":
            raise ConfigError("ablations.cnn_pool_delta does not apply to the vit backbone")
        if self.aggregation != "s6la" and not (ab.trainable_h and ab.selective):
            raise ConfigError("trainable_h / selective ablations require aggregation = s6la")
        opt = self.optimizer
        if opt.kind != "sgd_momentum":
            raise ConfigError("optimizer.kind must be sgd_momentum")
        if opt.lr < 0 or opt.epochs < 0 or opt.batch < 1:
            raise ConfigError("optimizer.lr/epochs must be non-negative and batch positive")
        ds = self.dataset
        if ds.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
        if ds.kind in ("idx_images", "csv_table") and not ds.path:
            raise ConfigError(f"dataset.path is required for {ds.kind}")
        if not 0 <= ds.test_fraction < 1:
            raise ConfigError("dataset.test_fraction must be in [0, 1)")
        return self


def parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(text: str, current, key: str):
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None

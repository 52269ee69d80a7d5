"""Experiment configuration: a flat ``key = value`` file or a named preset."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from ..ann import OptimConfig
from ..distill import LossConfig
from ..events import PartitionSpec, SyntheticGeometry
from ..snn import SurrogateParams


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # dataset
    num_classes: int = 4
    width: int = 32
    height: int = 32
    train_per_class: int = 200
    test_per_class: int = 50
    event_budget: int = 2000
    seed: int = 0
    normalize: str = "max"
    # frames
    T: int = 10
    t1: int = 5
    t2: int = 5
    # pre-training
    L: int = 16
    lambda_init: float = 1.0
    s1_epochs: int = 30
    ann_optimizer: str = "sgd"
    ann_lr: float = 0.1
    ann_momentum: float = 0.9
    ann_weight_decay: float = 5e-4
    ann_batch_size: int = 32
    ann_cosine: bool = True
    # fine-tuning
    s2_epochs: int = 100
    snn_optimizer: str = "adam"
    snn_lr: float = 1e-5
    snn_weight_decay: float = 0.0
    snn_batch_size: int = 32
    loss_mode: str = "skd"
    lambda_skd: float = 1.0
    temperature: float = 4.0
    surrogate_gamma: float = 1.0
    surrogate_vth: float = 1.0
    # output
    out_dir: str = "runs/default"

    def validate(self) -> "TrainConfig":
        if self.T != self.t1 + self.t2:
            raise ConfigError(f"T={self.T} must equal t1 + t2 = {self.t1 + self.t2}")
        try:
            PartitionSpec(self.t1, self.t2)
            LossConfig(self.loss_mode, self.lambda_skd, self.temperature)
            SurrogateParams(self.surrogate_gamma, self.surrogate_vth)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.s1_epochs < 1 or self.s2_epochs < 1:
            raise ConfigError("s1_epochs and s2_epochs must be >= 1")
        for name in ("num_classes", "width", "height", "train_per_class", "test_per_class",
                     "event_budget", "L", "ann_batch_size", "snn_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.event_budget < self.T:
            raise ConfigError("event_budget must be at least T")
        if self.normalize not in ("max", "none"):
            raise ConfigError(f"normalize must be 'max' or 'none', got {self.normalize!r}")
        for name in ("ann_optimizer", "snn_optimizer"):
            if getattr(self, name) not in ("sgd", "adam"):
                raise ConfigError(f"{name} must be 'sgd' or 'adam'")
        if self.lambda_init <= 0:
            raise ConfigError("lambda_init must be positive")
        return self

    # derived views
    @property
    def partition(self) -> PartitionSpec:
        return PartitionSpec(self.t1, self.t2)

    @property
    def geometry(self) -> SyntheticGeometry:
        return SyntheticGeometry(self.width, self.height, self.num_classes)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.loss_mode, self.lambda_skd, self.temperature)

    @property
    def surrogate(self) -> SurrogateParams:
        return SurrogateParams(self.surrogate_gamma, self.surrogate_vth)

    def ann_optim(self) -> OptimConfig:
        return OptimConfig(self.ann_optimizer, self.ann_lr, self.ann_momentum, self.ann_weight_decay,
                           self.ann_batch_size, self.s1_epochs, self.ann_cosine, self.seed)

    def snn_optim(self) -> OptimConfig:
        return OptimConfig(self.snn_optimizer, self.snn_lr, 0.9, self.snn_weight_decay,
                           self.snn_batch_size, self.s2_epochs, False, self.seed + 1)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# Desk-scale run used by the acceptance suite.
PRESETS: dict[str, dict] = {
    "default": dict(s1_epochs=30, s2_epochs=20, snn_lr=1e-3),
    "full": dict(),
    "smoke": dict(train_per_class=12, test_per_class=6, width=16, height=16, event_budget=600,
                  s1_epochs=3, s2_epochs=2, snn_lr=1e-3, out_dir="runs/smoke"),
}


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {name}") from None


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    changes = {}
    for k, v in pairs.items():
        if k not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        changes[k] = _coerce(k, v, _FIELD_TYPES[k])
    return cfg.replace(**changes)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split(sep, 1)
        pairs[k.strip()] = v
    return apply_overrides(base or TrainConfig(), pairs)


def load_config(source: str | os.PathLike | None = "default", env: dict | None = None) -> TrainConfig:
    """Resolve a preset name or config file path, then apply ``HSD_SEED``."""
    env = os.environ if env is None else env
    source = "default" if source is None else source
    if isinstance(source, str) and source in PRESETS:
        cfg = TrainConfig(**PRESETS[source])
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config {source!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
        cfg = parse_config_text(path.read_text())
    if env.get("HSD_SEED"):
        cfg = cfg.replace(seed=_coerce("HSD_SEED", env["HSD_SEED"], int))
    return cfg.validate()

"""Experiment configuration: ``key = value`` text files with ``#`` comments."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .datagen import MAX_ARCHITECTURES
from .errors import ConfigError
from .learner import TrainConfig
from .losses import DEFAULT_LAMBDA, LossConfig
from .model import VARIANTS, NetworkConfig

# config-file key -> dataclass attribute, where they differ
_ALIASES = {"lambda": "lam"}
_KEYS = {v: k for k, v in _ALIASES.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str = "mt_sc"
    memory_budget: float = 128
    lam: float | None = None  # None picks the variant's default
    temperature: float = 2.0
    gamma: float = 0.5
    lr: float = 0.001
    batch_size: int = 64
    patience: int = 5
    max_epochs: int = 15
    grad_clip: float = 10.0
    feature_dim: int = 64
    image_size: int = 32
    channels: int = 3
    seed: int = 0
    architectures: int = 5
    initial_architectures: int = 1
    train_count: int = 600
    val_count: int = 200
    test_count: int = 200
    amplitude: float = 0.5
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not (self.memory_budget == math.inf or (self.memory_budget >= 0 and float(self.memory_budget).is_integer())):
            raise ConfigError(f"memory_budget must be a non-negative integer or inf, got {self.memory_budget}")
        if not 1 <= self.initial_architectures <= self.architectures <= MAX_ARCHITECTURES:
            raise ConfigError(
                f"need 1 <= initial_architectures <= architectures <= {MAX_ARCHITECTURES}, "
                f"got {self.initial_architectures} and {self.architectures}"
            )
        if min(self.train_count, self.val_count, self.test_count) < 1:
            raise ConfigError("per-split sample counts must be at least 1")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ConfigError(f"amplitude must lie in [0, 1], got {self.amplitude}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        # delegate the remaining range checks to the consuming modules
        self.network_config()
        self.loss_config()
        self.train_config()

    @property
    def budget(self) -> float:
        return math.inf if self.memory_budget == math.inf else int(self.memory_budget)

    def resolved_lambda(self) -> float:
        return DEFAULT_LAMBDA[self.variant] if self.lam is None else self.lam

    def resolved(self) -> "ExperimentConfig":
        return replace(self, lam=self.resolved_lambda())

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            input_size=self.image_size, channels=self.channels, feature_dim=self.feature_dim, variant=self.variant
        )

    def loss_config(self) -> LossConfig:
        return LossConfig.for_variant(self.variant, self.gamma, self.temperature, self.lam)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            patience=self.patience,
            max_epochs=self.max_epochs,
            clip_norm=self.grad_clip,
            seed=self.seed,
        )

    def counts(self) -> dict[str, int]:
        return {"train": self.train_count, "val": self.val_count, "test": self.test_count}


def _convert(name: str, raw: str):
    field_type = {f.name: f.type for f in fields(ExperimentConfig)}[name]
    raw = raw.strip()
    try:
        if name == "memory_budget":
            return math.inf if raw.lower() in ("inf", "infinity", "∞") else int(raw)
        if name == "lam":
            return None if raw.lower() == "auto" else float(raw)
        if field_type == "int":
            return int(raw)
        if field_type == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {_KEYS.get(name, name)}") from None
    return raw


def parse_assignments(pairs: list[tuple[str, str]], base: ExperimentConfig | None = None) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for key, raw in pairs:
        name = _ALIASES.get(key.strip(), key.strip())
        if name not in known or key.strip() in _KEYS:
            raise ConfigError(f"unknown config key {key.strip()!r}")
        values[name] = _convert(name, raw)
    return replace(base or ExperimentConfig(), **values)


def parse_config(text: str, base: ExperimentConfig | None = None, source: str = "<config>") -> ExperimentConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        pairs.append((key, value))
    return parse_assignments(pairs, base)


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base, source=str(path))


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    pairs = []
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        pairs.append((key, value))
    return parse_assignments(pairs, config)


def format_config(config: ExperimentConfig) -> str:
    lines = ["# resolved experiment configuration"]
    for name, value in asdict(config).items():
        if name == "memory_budget":
            value = "inf" if value == math.inf else int(value)
        elif name == "lam" and value is None:
            value = "auto"
        lines.append(f"{_KEYS.get(name, name)} = {value}")
    return "\n".join(lines) + "\n"

"""Run configuration: flat ``key = value`` files merged with command-line flags.

Every key has a default and mirrors a flag name (``batch_size`` <-> ``--batch-size``).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import AugmentConfig
from .model import ModelConfig
from .training import TrainConfig

SEED_PURPOSES = ("init", "folds", "shuffle")


def derive_seed(seed: int, purpose: str) -> int:
    """Independent 32-bit seed for one purpose, fanned out from the run seed."""
    if purpose not in SEED_PURPOSES:
        raise ValueError(f"unknown seed purpose {purpose!r}; expected one of {SEED_PURPOSES}")
    tag = zlib.crc32(purpose.encode())
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    data: str = ""
    fixed_split: str = ""
    task: str = "task"
    input_size: int = 224
    num_classes: int = 0  # 0: taken from the dataset
    width_multiplier: Fraction = Fraction(1)
    dtype: str = "float32"
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    plateau_patience: int = 12
    plateau_factor: float = 0.1
    min_lr: float = 1e-7
    freeze_prefixes: str = ""  # comma-separated parameter-name prefixes Adam leaves untouched
    epochs: int = 50
    batch_size: int = 16
    rotation_deg_max: float = 15.0
    shift_frac_max: float = 0.1
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    augment: bool = True
    weight_mode: str = "inverse_frequency"
    k: int = 5
    val_frac: float = 0.1
    seed: int = 0
    workers: int = 1
    deterministic: bool = False
    out: str = ""

    def __post_init__(self):
        self.width_multiplier = Fraction(self.width_multiplier)
        if self.weight_mode not in ("inverse_frequency", "paper_literal", "none"):
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    # -- conversions ---------------------------------------------------------

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        k = num_classes if num_classes is not None else self.num_classes
        return ModelConfig(self.input_size, self.input_size, k, self.width_multiplier, self.dtype)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr0=self.lr0, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon,
                           plateau_patience=self.plateau_patience, plateau_factor=self.plateau_factor,
                           min_lr=self.min_lr, epochs=self.epochs, batch_size=self.batch_size,
                           seed=derive_seed(self.seed, "shuffle"),
                           freeze_prefixes=tuple(p.strip() for p in self.freeze_prefixes.split(",") if p.strip()))

    def augment_config(self) -> AugmentConfig | None:
        if not self.augment:
            return None
        return AugmentConfig(self.rotation_deg_max, self.shift_frac_max, self.hflip_prob, self.vflip_prob)

    def to_text(self) -> str:
        """The fully resolved config in the same ``key = value`` format it is read from."""
        lines = ["# resolved run configuration"]
        for key, value in asdict(self).items():
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = asdict(self)
        d["width_multiplier"] = str(self.width_multiplier)
        return json.dumps(d, indent=1, sort_keys=True)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(RunConfig, key, None)
    try:
        if isinstance(default, bool):
            return _bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, Fraction):
            return Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text.strip()


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        values[key] = _convert(key, value)
    return values


def resolve(config_path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then flag overrides (``None`` values are ignored)."""
    values = {}
    if config_path:
        values.update(parse_config_text(Path(config_path).read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = _convert(key, value) if isinstance(value, str) else value
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

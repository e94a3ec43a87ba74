"""Flat ``key=value`` experiment configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from fractions import Fraction
from pathlib import Path

from .data import MotionTask
from .errors import ConfigError
from .graph import PRESETS
from .shift import parse_fraction, parse_pattern, parse_spec_text
from .tensor import check_dims

# Kinetics-400 recipe, kept for reference only; nothing trains at this scale.
KINETICS_REFERENCE_SCHEDULE = dict(
    epochs=100, lr=7.5e-3, lr_steps=(40, 80), lr_decay=0.1, batch_size=48,
    momentum=0.9, weight_decay=1e-4, dropout=0.5, frames=8,
)
SOMETHING_V2_REFERENCE_SCHEDULE = dict(KINETICS_REFERENCE_SCHEDULE, epochs=50, lr_steps=(20, 40))


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "tiny"
    shift: str = "pattern=T+H+W f=3/8"
    frames: int = 8
    height: int = 32
    width: int = 32
    square: int = 5
    noise: float = 0.05
    channels: int = 1
    epochs: int = 30
    lr: float = 0.05
    lr_steps: tuple = (15, 25)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    train_samples: int = 800
    eval_samples: int = 200
    seed: int = 0
    fractions: tuple = (Fraction(0), Fraction(3, 8))
    patterns: tuple = ("T", "H", "W", "T+H+W")
    input_dims: tuple | None = None
    bench_dims: tuple = (2, 32, 8, 16, 16)
    bench_sizes: int = 3
    repetitions: int = 5
    out: str = "runs"

    @property
    def task(self) -> MotionTask:
        return MotionTask(self.frames, self.height, self.width, self.square, self.noise, self.channels)

    @property
    def shift_spec(self):
        """``(pattern, fraction)`` or None when shifting is disabled."""
        if self.shift.strip().lower() == "none":
            return None
        return parse_spec_text(self.shift)

    @property
    def cost_dims(self) -> tuple:
        if self.input_dims is not None:
            return self.input_dims
        return (1, self.channels, self.frames, self.height, self.width)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        return self.lr * self.lr_decay ** sum(epoch >= s for s in self.lr_steps)

    def validate(self) -> "ExperimentConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        self.shift_spec
        self.task.validate()
        for name in ("epochs", "train_samples", "eval_samples", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0; momentum and weight_decay >= 0")
        if self.repetitions < 3:
            raise ConfigError("repetitions must be >= 3")
        if self.bench_sizes < 1:
            raise ConfigError("bench_sizes must be >= 1")
        check_dims(self.bench_dims)
        if self.input_dims is not None:
            check_dims(self.input_dims)
        return self


def _ints(text):
    return tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())


_PARSERS = {
    "preset": str.strip,
    "shift": str.strip,
    "out": str.strip,
    "lr_steps": _ints,
    "input_dims": _ints,
    "bench_dims": _ints,
    "fractions": lambda s: tuple(parse_fraction(t) for t in s.split(",") if t.strip()),
    "patterns": lambda s: tuple(t.strip() for t in s.split(",") if t.strip()),
}


def _parse_value(key: str, text: str):
    if key in _PARSERS:
        value = _PARSERS[key](text)
        if key == "patterns":
            for p in value:
                parse_pattern(p)
        return value
    default = ExperimentConfig.__dataclass_fields__[key].default
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def apply_overrides(config: ExperimentConfig, pairs, source="<override>") -> ExperimentConfig:
    """Apply ``(lineno, key, value)`` triples, reporting errors with their origin."""
    known = {f.name for f in fields(ExperimentConfig)}
    updates = {}
    for lineno, key, value in pairs:
        where = f"{source}:{lineno}" if lineno else source
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            updates[key] = _parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{where}: {key}: {exc}") from None
        except ValueError:
            raise ConfigError(f"{where}: bad value for {key}: {value.strip()!r}") from None
    return replace(config, **updates)


def parse_config_text(text: str, source="<config>") -> ExperimentConfig:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        pairs.append((lineno, key.strip(), value))
    config = apply_overrides(ExperimentConfig(), pairs, source)
    try:
        return config.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))

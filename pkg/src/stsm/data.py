"""Synthetic moving-square clips and clip fixture files.

Each clip shows a bright square on a dark background, moving one pixel per
frame right, left, down or up. Clips come in time-reversal pairs: the left
clip is the right clip played backwards, and the same holds for up and down.
A model that only averages per-frame features therefore cannot tell the two
members of a pair apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import load_tensor, save_tensor

CLASSES = ("right", "left", "down", "up")
RIGHT, LEFT, DOWN, UP = range(4)


@dataclass(frozen=True)
class MotionTask:
    frames: int = 8
    height: int = 32
    width: int = 32
    square: int = 5
    noise: float = 0.05
    channels: int = 1

    @property
    def num_classes(self) -> int:
        return len(CLASSES)

    def validate(self):
        if min(self.frames, self.height, self.width, self.square, self.channels) < 1:
            raise ConfigError(f"task geometry must be positive: {self}")
        travel = self.square + self.frames - 1
        if travel > self.width or travel > self.height:
            raise ConfigError(
                f"a {self.square}px square moving {self.frames - 1}px does not fit "
                f"{self.height}x{self.width}"
            )
        if not 0 <= self.noise <= 1:
            raise ConfigError(f"noise amplitude must lie in [0, 1], got {self.noise}")


@dataclass
class ClipSample:
    clip: np.ndarray  # (1, C, T, H, W), values in [0, 1]
    label: int
    seed: int | None = None
    pair: int | None = None


def _render(task: MotionTask, rng, vertical: bool) -> np.ndarray:
    T, H, W, s = task.frames, task.height, task.width, task.square
    video = np.zeros((T, H, W))
    if vertical:
        row0 = rng.integers(0, H - s - (T - 1) + 1)
        col0 = rng.integers(0, W - s + 1)
    else:
        row0 = rng.integers(0, H - s + 1)
        col0 = rng.integers(0, W - s - (T - 1) + 1)
    for t in range(T):
        r = row0 + (t if vertical else 0)
        c = col0 + (0 if vertical else t)
        video[t, r : r + s, c : c + s] = 1.0
    if task.noise > 0:
        video = np.clip(video + rng.uniform(-task.noise, task.noise, size=video.shape), 0.0, 1.0)
    return video


def generate_batch(task: MotionTask, n: int, seed: int) -> list[ClipSample]:
    """``n`` clips made from matched reversal pairs, alternating horizontal and
    vertical pairs. The output is ordered right, left, down, up, right, ..."""
    task.validate()
    if n < 0:
        raise ConfigError("sample count must be >= 0")
    rng = np.random.default_rng(seed)
    samples = []
    for pair in range((n + 1) // 2):
        vertical = pair % 2 == 1
        video = _render(task, rng, vertical)
        clip = np.repeat(video[None, None], task.channels, axis=1)
        forward_label, reverse_label = (DOWN, UP) if vertical else (RIGHT, LEFT)
        samples.append(ClipSample(clip, forward_label, seed, pair))
        reversed_clip = np.ascontiguousarray(clip[:, :, ::-1])
        samples.append(ClipSample(reversed_clip, reverse_label, seed, pair))
    return samples[:n]


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    """Clips as one (n, C, T, H, W) array plus an int label vector."""
    x = np.concatenate([s.clip for s in samples], axis=0)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".label")


def save_clip(sample: ClipSample, path) -> None:
    path = Path(path)
    save_tensor(path, sample.clip)
    _sidecar(path).write_text(f"label={sample.label}\n")


def load_clip_file(path, num_classes: int = len(CLASSES)) -> ClipSample:
    path = Path(path)
    clip = load_tensor(path)
    if clip.shape[0] != 1:
        raise FormatError(f"{path}: clip must have N=1, got {clip.shape}")
    if clip.min() < 0 or clip.max() > 1:
        raise FormatError(f"{path}: pixel values outside [0, 1]")
    try:
        text = _sidecar(path).read_text().strip()
    except FileNotFoundError:
        raise FormatError(f"{path}: missing label sidecar {_sidecar(path).name}") from None
    key, _, value = text.partition("=")
    if key != "label" or not value.strip().lstrip("-").isdigit():
        raise FormatError(f"{path}: bad label sidecar {text!r}")
    label = int(value)
    if not 0 <= label < num_classes:
        raise FormatError(f"{path}: label {label} outside [0, {num_classes})")
    return ClipSample(clip, label)

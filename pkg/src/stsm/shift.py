"""Channel-partitioned unit shifts along T, H and W with zero fill.

A :class:`ShiftSpec` splits the channel axis into consecutive ranges. Each
axis group in the pattern gets two equal ranges, forward (+1) first and then
backward (-1). The leftover channels form a trailing identity range. Shifting
a range by +1 along an axis moves content toward increasing index, and the
vacated slice is zero-filled.

The same mapping is a depthwise convolution with one-hot 3x3x3 kernels.
:func:`build_sparse_kernel` and :func:`oracle_sparse_conv` give that form,
which serves as the reference for tests and benchmarks.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, RangeError
from .tensor import ChannelRange, as_tensor

SHIFT_AXES = ("T", "H", "W")
_AXIS_DIM = {"T": 2, "H": 3, "W": 4}


@dataclass(frozen=True)
class ShiftGroup:
    axes: tuple[str, ...]
    direction: int

    def __post_init__(self):
        if not self.axes:
            raise ConfigError("shift group needs at least one axis")
        if any(a not in _AXIS_DIM for a in self.axes):
            raise ConfigError(f"bad shift axes {self.axes}")
        if self.direction not in (1, -1):
            raise ConfigError(f"direction must be +1 or -1, got {self.direction}")

    def reversed(self) -> "ShiftGroup":
        return ShiftGroup(self.axes, -self.direction)


@dataclass(frozen=True)
class ShiftSpec:
    channels: int
    pattern: tuple[tuple[str, ...], ...]
    fraction: Fraction
    layout: tuple[tuple[ChannelRange, ShiftGroup], ...]
    identity: ChannelRange

    @property
    def group_size(self) -> int:
        """Channels per direction per axis group."""
        return self.layout[0][0].size if self.layout else 0

    @property
    def shifted_channels(self) -> int:
        return sum(r.size for r, _ in self.layout)

    def text(self) -> str:
        return format_spec(self.pattern, self.fraction)


@dataclass(frozen=True)
class SparseKernel:
    """Per-channel 3x3x3 (T, H, W) depthwise kernels."""

    weights: np.ndarray = field(repr=False)

    @property
    def channels(self) -> int:
        return self.weights.shape[0]


def canonical_axes(axes) -> tuple[str, ...]:
    axes = tuple(axes)
    if len(set(axes)) != len(axes):
        raise ConfigError(f"repeated axis in group {''.join(axes)!r}")
    for a in axes:
        if a not in _AXIS_DIM:
            raise ConfigError(f"unknown shift axis {a!r}")
    return tuple(a for a in SHIFT_AXES if a in axes)


def parse_pattern(text: str) -> tuple[tuple[str, ...], ...]:
    """``"T+HW"`` -> ``(("T",), ("H", "W"))``."""
    text = text.strip()
    if not text:
        raise ConfigError("empty shift pattern")
    groups = []
    for token in text.split("+"):
        token = token.strip().upper()
        if not token or not re.fullmatch(r"[A-Z]+", token):
            raise ConfigError(f"bad pattern token {token!r} in {text!r}")
        groups.append(canonical_axes(token))
    return tuple(groups)


def format_pattern(pattern) -> str:
    return "+".join("".join(group) for group in pattern)


def parse_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        frac = value
    elif isinstance(value, float):
        frac = Fraction(repr(value))
    else:
        try:
            frac = Fraction(str(value).strip())
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"bad shift fraction {value!r}") from None
    if not 0 <= frac <= 1:
        raise ConfigError(f"shift fraction must lie in [0, 1], got {frac}")
    return frac


def format_spec(pattern, fraction) -> str:
    return f"pattern={format_pattern(pattern)} f={parse_fraction(fraction)}"


def parse_spec_text(text: str) -> tuple[tuple[tuple[str, ...], ...], Fraction]:
    """Parse ``"pattern=T+H+W f=3/8"`` into ``(pattern, fraction)``."""
    fields = {}
    for token in text.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {token!r}")
        fields[key.strip()] = value
    unknown = set(fields) - {"pattern", "f"}
    if unknown:
        raise ConfigError(f"unknown shift spec keys {sorted(unknown)}")
    if "pattern" not in fields:
        raise ConfigError(f"shift spec {text!r} has no pattern")
    return parse_pattern(fields["pattern"]), parse_fraction(fields.get("f", "3/8"))


def build_shift_spec(channels: int, pattern, fraction) -> ShiftSpec:
    if isinstance(pattern, str):
        pattern = parse_pattern(pattern)
    pattern = tuple(canonical_axes(g) for g in pattern)
    if not pattern:
        raise ConfigError("empty shift pattern")
    fraction = parse_fraction(fraction)
    if channels < 2 * len(pattern):
        raise ConfigError(
            f"C={channels} too small for {len(pattern)} groups (needs >= {2 * len(pattern)})"
        )
    per_direction = math.floor(channels * fraction / (2 * len(pattern)))
    layout = []
    start = 0
    for axes in pattern:
        for direction in (1, -1):
            layout.append((ChannelRange(start, start + per_direction), ShiftGroup(axes, direction)))
            start += per_direction
    if per_direction == 0:
        layout = []
    return ShiftSpec(
        channels=channels,
        pattern=pattern,
        fraction=fraction,
        layout=tuple(layout),
        identity=ChannelRange(start, channels),
    )


def spec_from_text(channels: int, text: str) -> ShiftSpec:
    pattern, fraction = parse_spec_text(text)
    return build_shift_spec(channels, pattern, fraction)


def shift_adjoint(spec: ShiftSpec) -> ShiftSpec:
    layout = tuple((r, g.reversed()) for r, g in spec.layout)
    return ShiftSpec(spec.channels, spec.pattern, spec.fraction, layout, spec.identity)


def _shift_slices(shape, axes, offset):
    dst = [slice(None)] * len(shape)
    src = [slice(None)] * len(shape)
    for a in axes:
        d = _AXIS_DIM[a]
        if offset > 0:
            dst[d], src[d] = slice(1, None), slice(None, -1)
        else:
            dst[d], src[d] = slice(None, -1), slice(1, None)
    return tuple(dst), tuple(src)


def shift_along_axes(x, axes, offset: int, channels: ChannelRange) -> np.ndarray:
    """Shift the channels in ``channels`` by ``offset`` along every axis in ``axes`` at once."""
    x = as_tensor(x)
    if offset not in (1, -1):
        raise ConfigError(f"offset must be +1 or -1, got {offset}")
    axes = canonical_axes(axes)
    channels.check(x.shape[1])
    out = x.copy()
    if channels.size == 0:
        return out
    block = x[:, channels.as_slice()]
    shifted = np.zeros_like(block)
    dst, src = _shift_slices(block.shape, axes, offset)
    shifted[dst] = block[src]
    out[:, channels.as_slice()] = shifted
    return out


def _check_channels(x: np.ndarray, spec: ShiftSpec) -> None:
    if x.shape[1] != spec.channels:
        raise ConfigError(f"spec built for C={spec.channels}, tensor has C={x.shape[1]}")


def apply_stsm(x, spec: ShiftSpec) -> np.ndarray:
    x = as_tensor(x)
    _check_channels(x, spec)
    out = np.empty_like(x)
    for rng, group in spec.layout:
        block = x[:, rng.as_slice()]
        target = out[:, rng.as_slice()]
        target.fill(0.0)
        dst, src = _shift_slices(block.shape, group.axes, group.direction)
        target[dst] = block[src]
    out[:, spec.identity.as_slice()] = x[:, spec.identity.as_slice()]
    return out


def apply_stsm_inplace(x: np.ndarray, spec: ShiftSpec) -> np.ndarray:
    """Shift ``x`` in place, one axis at a time per channel slab. Returns ``x``."""
    if x.ndim != 5 or x.dtype != np.float64:
        raise RangeError("in-place shift needs a float64 rank-5 array")
    _check_channels(x, spec)
    for rng, group in spec.layout:
        slab = x[:, rng.as_slice()]
        for a in group.axes:
            d = _AXIS_DIM[a]
            lead = [slice(None)] * 5
            dst, src = _shift_slices(slab.shape, (a,), group.direction)
            # numpy buffers overlapping assignments, so this is safe in place
            slab[dst] = slab[src]
            lead[d] = 0 if group.direction > 0 else -1
            slab[tuple(lead)] = 0.0
    return x


def build_sparse_kernel(spec: ShiftSpec) -> SparseKernel:
    """One-hot kernels reproducing ``spec`` under ``out(i) = sum_k w[k] * x(i + k - 1)``."""
    weights = np.zeros((spec.channels, 3, 3, 3))
    weights[:, 1, 1, 1] = 1.0
    for rng, group in spec.layout:
        tap = [1, 1, 1]
        for a in group.axes:
            # out(i) = x(i - direction) needs k - 1 = -direction
            tap[_AXIS_DIM[a] - 2] = 1 - group.direction
        for c in range(rng.start, rng.end):
            weights[c] = 0.0
            weights[c, tap[0], tap[1], tap[2]] = 1.0
    return SparseKernel(weights)


def oracle_sparse_conv(x, kernel: SparseKernel) -> np.ndarray:
    """Direct depthwise 3-D cross-correlation with zero same-padding.

    Visits all 27 taps for every channel, whatever the kernel values.
    """
    x = as_tensor(x)
    if kernel.channels != x.shape[1]:
        raise ConfigError(f"kernel has {kernel.channels} channels, input has {x.shape[1]}")
    _, _, T, H, W = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    w = kernel.weights
    for dt in range(3):
        for dh in range(3):
            for dw in range(3):
                tap = w[:, dt, dh, dw][None, :, None, None, None]
                out += tap * padded[:, :, dt : dt + T, dh : dh + H, dw : dw + W]
    return out

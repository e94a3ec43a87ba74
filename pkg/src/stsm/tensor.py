"""Dense rank-5 tensors in (N, C, T, H, W) layout.

A tensor is a C-contiguous ``float64`` numpy array with exactly five axes;
element ``(n, c, t, h, w)`` lives at flat offset
``((((n*C + c)*T + t)*H + h)*W + w)``. Functions here never mutate their
inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError, RangeError, ShapeError

AXES = ("N", "C", "T", "H", "W")
AXIS_INDEX = {name: i for i, name in enumerate(AXES)}

MAGIC = b"STSMT5\x00\x01"
_HEADER = struct.Struct("<8s5Q")

# upper bound on elements per tensor (2 GiB of doubles)
MAX_ELEMENTS = 1 << 28


@dataclass(frozen=True)
class ChannelRange:
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise RangeError(f"bad channel range [{self.start}, {self.end})")

    @property
    def size(self) -> int:
        return self.end - self.start

    def check(self, channels: int) -> None:
        if self.end > channels:
            raise RangeError(f"channel range [{self.start}, {self.end}) exceeds C={channels}")

    def as_slice(self) -> slice:
        return slice(self.start, self.end)


def check_dims(dims: Iterable[int]) -> tuple[int, int, int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 5:
        raise ShapeError(f"expected 5 dims (N, C, T, H, W), got {dims}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise ShapeError(f"{dims} holds {count} elements, over the budget of {MAX_ELEMENTS}")
    return dims


def as_tensor(x) -> np.ndarray:
    """Validate ``x`` as a rank-5 tensor and return it as contiguous float64."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    check_dims(arr.shape)
    return arr


def new_tensor(dims, fill: float = 0.0) -> np.ndarray:
    return np.full(check_dims(dims), float(fill), dtype=np.float64)


def offset(dims, index) -> int:
    """Flat offset of ``index`` in a tensor of shape ``dims``."""
    n, c, t, h, w = index
    _, C, T, H, W = dims
    return (((n * C + c) * T + t) * H + h) * W + w


def get(x: np.ndarray, index) -> float:
    return float(x.reshape(-1)[offset(x.shape, index)])


def set_value(x: np.ndarray, index, value: float) -> None:
    """Mutating setter; the only in-place operation in this module."""
    x.reshape(-1)[offset(x.shape, index)] = value


_ELEMENTWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def _axis_numbers(axes) -> tuple[int, ...]:
    out = []
    for ax in axes:
        if isinstance(ax, str):
            if ax not in AXIS_INDEX:
                raise ShapeError(f"unknown axis {ax!r}")
            ax = AXIS_INDEX[ax]
        if not 0 <= ax < 5:
            raise ShapeError(f"axis {ax} out of range")
        out.append(ax)
    return tuple(sorted(set(out)))


def reduce(a: np.ndarray, axes, op: str) -> np.ndarray:
    """Reduce over ``axes`` (names or numbers), keeping them with extent 1.

    Sums accumulate sequentially in flat index order with a single
    accumulator, so ``reduce(x, AXES, "sum")`` equals a plain Python loop over
    ``x.ravel()``. ``mean`` is that sum divided by the element count.
    """
    a = as_tensor(a)
    axes = _axis_numbers(axes)
    kept = [i for i in range(5) if i not in axes]
    out_shape = tuple(1 if i in axes else a.shape[i] for i in range(5))
    if not axes:
        return a.copy()
    count = int(np.prod([a.shape[i] for i in axes]))
    # reduced axes last, in their original relative order
    moved = a.transpose(kept + list(axes)).reshape(-1, count)
    if op == "max":
        res = moved.max(axis=1)
    elif op in ("sum", "mean"):
        # cumsum is strictly sequential, unlike np.sum's pairwise scheme
        res = np.cumsum(moved, axis=1)[:, -1]
        if op == "mean":
            res = res / count
    else:
        raise ValueError(f"unknown reduce op {op!r}")
    return np.ascontiguousarray(res.reshape(out_shape))


def save_tensor(path, x: np.ndarray) -> None:
    x = as_tensor(x)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *x.shape))
        fh.write(x.astype("<f8", copy=False).tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    try:
        dims = check_dims(dims)
    except ShapeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    expected = _HEADER.size + 8 * int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return data.astype(np.float64).reshape(dims)

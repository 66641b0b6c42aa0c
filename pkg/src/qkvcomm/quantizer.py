"""Asymmetric per-tensor quantization and sensitivity-driven bit allocation.

Codes are computed from float64 parameters; ``QuantParams`` keeps their
float32 narrowing, which is all the wire carries and all dequantization
uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyInput, InvalidInput, LengthMismatch, NonFiniteInput
from .kv_model import KvCache

MIN_BITS = 2
MAX_BITS = 8


def f32(x: float) -> float:
    """Round a Python float to the nearest float32 value."""
    return float(np.float32(x))


def _check_bits(bits: int) -> int:
    bits = int(bits)
    if not MIN_BITS <= bits <= MAX_BITS:
        raise InvalidInput(f"bits must lie in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    return bits


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: float
    zero_point: float

    def __post_init__(self):
        _check_bits(self.bits)
        object.__setattr__(self, "scale", f32(self.scale))
        # + 0.0 folds -0.0 into +0.0 so equal params encode to equal bytes
        object.__setattr__(self, "zero_point", f32(self.zero_point) + 0.0)
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise InvalidInput(f"scale must be finite and > 0, got {self.scale}")
        if not math.isfinite(self.zero_point):
            raise InvalidInput("zero_point must be finite")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray  # flat uint8
    params: QuantParams
    shape: tuple[int, int, int, int]


@dataclass(frozen=True)
class SensitivityReport:
    per_layer_error: tuple[float, ...]
    probe_bits: int


@dataclass(frozen=True)
class BitAllocation:
    per_layer_bits: tuple[int, ...]
    max_bits: int = 8
    target_bits: int = 6
    min_bits: int = 4

    def __post_init__(self):
        check_bit_triple(self.max_bits, self.target_bits, self.min_bits)
        allowed = {self.max_bits, self.target_bits, self.min_bits}
        if any(b not in allowed for b in self.per_layer_bits):
            raise InvalidInput("per-layer bits must be one of max/target/min")

    @property
    def mean_bits(self) -> float:
        return sum(self.per_layer_bits) / len(self.per_layer_bits)


def check_bit_triple(max_bits: int, target_bits: int, min_bits: int) -> None:
    for b in (max_bits, target_bits, min_bits):
        _check_bits(b)
    if not min_bits <= target_bits <= max_bits:
        raise InvalidInput(f"need min <= target <= max, got ({max_bits}, {target_bits}, {min_bits})")


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.where(v >= 0, np.floor(v + 0.5), np.ceil(v - 0.5))


def choose_params(t: np.ndarray, bits: int) -> tuple[QuantParams, float, float]:
    """Stored float32 params plus the float64 ``(scale, zero_point)`` codes are computed with."""
    lo = float(t.min())
    hi = float(t.max())
    scale = (hi - lo) / ((1 << bits) - 1)
    # a range too narrow to survive float32 narrowing counts as constant
    if hi == lo or f32(scale) == 0.0:
        return QuantParams(bits, 1.0, -lo), 1.0, -lo
    zero_point = -lo / scale
    return QuantParams(bits, scale, zero_point), scale, zero_point


def quantize(t, bits: int) -> QuantizedTensor:
    """Map ``t`` onto unsigned ``bits``-bit codes spanning [min(t), max(t)].

    Rounding is half-away-from-zero; a constant tensor gets ``scale = 1``,
    ``zero_point = -min`` and all-zero codes.
    """
    bits = _check_bits(bits)
    arr = np.asarray(t, dtype=np.float32)
    if arr.size == 0:
        raise EmptyInput("cannot quantize an empty tensor")
    if not np.isfinite(arr).all():
        raise NonFiniteInput("tensor contains NaN or Inf")
    params, scale, zero_point = choose_params(arr, bits)
    v = arr.astype(np.float64).ravel() / scale + zero_point
    codes = np.clip(round_half_away(v), 0, params.levels).astype(np.uint8)
    shape = arr.shape if arr.ndim == 4 else (1, 1, 1, arr.size)
    return QuantizedTensor(codes, params, tuple(int(s) for s in shape))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    out = (q.codes.astype(np.float64) - q.params.zero_point) * q.params.scale
    return out.astype(np.float32).reshape(q.shape)


def roundtrip(t, bits: int) -> np.ndarray:
    return dequantize(quantize(t, bits)).reshape(np.shape(t))


def squared_error(t: np.ndarray, bits: int) -> float:
    diff = t.astype(np.float64) - roundtrip(t, bits).astype(np.float64)
    return float(np.dot(diff.ravel(), diff.ravel()))


def profile_sensitivity(caches: Sequence[KvCache], probe_bits: int) -> SensitivityReport:
    """Mean (over caches) squared K and V reconstruction error per layer at ``probe_bits``."""
    probe_bits = _check_bits(probe_bits)
    if not caches:
        raise EmptyInput("calibration set is empty")
    n_layers = caches[0].num_layers
    if any(c.num_layers != n_layers for c in caches):
        raise LengthMismatch("caches disagree on layer count")
    totals = [0.0] * n_layers
    for cache in caches:
        for l, (k, v) in enumerate(cache.layers):
            totals[l] += squared_error(k, probe_bits) + squared_error(v, probe_bits)
    return SensitivityReport(tuple(t / len(caches) for t in totals), probe_bits)


def bucket_sizes(num_layers: int) -> tuple[int, int, int]:
    """(top, middle, bottom) counts for the 30/40/30 split.

    Outer buckets hold ``round(0.3 * L)`` layers (half rounds up), the top
    bucket never drops to zero, and the middle takes the remainder.
    """
    outer = (3 * num_layers + 5) // 10
    top = min(num_layers, max(1, outer))
    bottom = min(outer, num_layers - top)
    return top, num_layers - top - bottom, bottom


def allocate_bits(report: SensitivityReport, max_bits: int = 8, target_bits: int = 6,
                  min_bits: int = 4) -> BitAllocation:
    """Most sensitive 30% of layers get ``max_bits``, least sensitive 30% get ``min_bits``."""
    check_bit_triple(max_bits, target_bits, min_bits)
    errors = report.per_layer_error
    n = len(errors)
    top, mid, _ = bucket_sizes(n)
    ranked = sorted(range(n), key=lambda i: (-errors[i], i))
    bits = [min_bits] * n
    for rank, layer in enumerate(ranked):
        if rank < top:
            bits[layer] = max_bits
        elif rank < top + mid:
            bits[layer] = target_bits
    return BitAllocation(tuple(bits), max_bits, target_bits, min_bits)

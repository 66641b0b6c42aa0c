"""Dense sub-byte packing of quantization codes.

Layout: code ``i`` occupies absolute bit positions ``[i*b, (i+1)*b)`` of a
little-endian bitstream, least significant bit first.  Unused high bits of
the final byte are zero, so the encoding is canonical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CodeOutOfRange, InvalidInput, LengthMismatch
from .quantizer import QuantizedTensor, QuantParams


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def _check_bits(bits: int) -> None:
    if not 2 <= bits <= 8:
        raise InvalidInput(f"bits must lie in [2, 8], got {bits}")


def pack(codes, bits: int) -> bytes:
    _check_bits(bits)
    c = np.asarray(codes)
    if c.size == 0:
        return b""
    c = c.ravel().astype(np.int64)
    if (c < 0).any() or (c >= (1 << bits)).any():
        raise CodeOutOfRange(f"codes must lie in [0, {(1 << bits) - 1}]")
    if bits == 8:
        return c.astype(np.uint8).tobytes()
    planes = ((c[:, None] >> np.arange(bits)) & 1).astype(np.uint8)
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def unpack(data: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack`; returns ``count`` codes as ``uint8``."""
    _check_bits(bits)
    if count < 0:
        raise InvalidInput("count must be non-negative")
    if len(data) != packed_size(count, bits):
        raise LengthMismatch(f"expected {packed_size(count, bits)} bytes for {count} "
                             f"{bits}-bit codes, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8)
    if bits == 8:
        return raw.copy()
    planes = np.unpackbits(raw, bitorder="little")[: count * bits].reshape(count, bits)
    weights = (1 << np.arange(bits)).astype(np.uint8)
    return (planes * weights).sum(axis=1, dtype=np.uint16).astype(np.uint8)


def padding_is_zero(data: bytes, bits: int, count: int) -> bool:
    used = count * bits
    if used % 8 == 0 or not data:
        return True
    return data[-1] >> (used % 8) == 0


@dataclass(frozen=True)
class PackedTensor:
    data: bytes
    bits: int
    count: int
    params: QuantParams
    shape: tuple[int, int, int, int]

    def __post_init__(self):
        if self.params.bits != self.bits:
            raise InvalidInput("params.bits disagrees with bits")
        if self.count != math.prod(self.shape):
            raise LengthMismatch("count must equal the product of shape")
        if len(self.data) != packed_size(self.count, self.bits):
            raise LengthMismatch("packed byte length disagrees with count and bits")


def pack_tensor(q: QuantizedTensor) -> PackedTensor:
    bits = q.params.bits
    return PackedTensor(pack(q.codes, bits), bits, int(q.codes.size), q.params, q.shape)


def unpack_tensor(p: PackedTensor) -> QuantizedTensor:
    return QuantizedTensor(unpack(p.data, p.bits, p.count), p.params, p.shape)

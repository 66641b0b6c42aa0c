"""Canonical binary encoding of transmission payloads (format version 1).

All integers and floats are little-endian. Strings are UTF-8 with a u16
byte-length prefix.

    header   "QKVC" | u8 version | u8 flags | str sender_model_id
             | u16 total_layers | u16 selected_layers | u32 original_seq_len
    layer    u16 index, then for key and value:
             u8 bits | f32 scale | f32 zero_point | u32 x4 shape
             | u32 nbytes | packed codes
    facts    u16 count, then per fact:
             u8 kind | f32 confidence | str content
             | u8 n_meta | (str key, str value) x n_meta
    trailer  u32 CRC-32 (IEEE) of every preceding byte

Flags: bit 0 = calibration already applied, bit 1 = facts present.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

from .bitpack import PackedTensor, packed_size, padding_is_zero
from .errors import (
    BadMagic,
    CrcMismatch,
    InvalidInput,
    MalformedLength,
    Truncated,
    UnrepresentableField,
    UnsupportedVersion,
)
from .extraction import KINDS, Fact
from .quantizer import QuantParams

MAGIC = b"QKVC"
VERSION = 1
FLAG_CALIBRATED = 0x01
FLAG_FACTS = 0x02
_KNOWN_FLAGS = FLAG_CALIBRATED | FLAG_FACTS

KIND_CODES = {kind: code for code, kind in enumerate(KINDS)}

HEADER_FIXED = 4 + 1 + 1 + 2 + 2 + 2 + 4
TENSOR_OVERHEAD = 1 + 4 + 4 + 16 + 4
LAYER_OVERHEAD = 2 + 2 * TENSOR_OVERHEAD
CRC_SIZE = 4

_U8, _U16, _U32 = 0xFF, 0xFFFF, 0xFFFFFFFF


@dataclass(frozen=True)
class PayloadHeader:
    sender_model_id: str
    total_layers: int
    selected_layers: int
    original_seq_len: int
    flags: int = 0


@dataclass(frozen=True)
class LayerRecord:
    index: int
    key: PackedTensor
    value: PackedTensor


@dataclass(frozen=True)
class Payload:
    header: PayloadHeader
    layers: tuple[LayerRecord, ...] = ()
    facts: tuple[Fact, ...] = ()
    crc: int | None = field(default=None, compare=False)

    @property
    def calibrated(self) -> bool:
        return bool(self.header.flags & FLAG_CALIBRATED)


def make_header(sender_model_id: str, total_layers: int, layers, facts,
                original_seq_len: int, calibrated: bool = False) -> PayloadHeader:
    flags = (FLAG_CALIBRATED if calibrated else 0) | (FLAG_FACTS if facts else 0)
    return PayloadHeader(sender_model_id, total_layers, len(layers), original_seq_len, flags)


# -- encoding -------------------------------------------------------------------

def _check(value: int, limit: int, what: str) -> int:
    if not 0 <= value <= limit:
        raise UnrepresentableField(f"{what}={value} does not fit its wire field")
    return value


def _str(text: str, what: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<H", _check(len(raw), _U16, f"len({what})")) + raw


def _validate(p: Payload) -> None:
    h = p.header
    if h.selected_layers != len(p.layers):
        raise InvalidInput("header selected_layers disagrees with layer records")
    if h.selected_layers > h.total_layers:
        raise InvalidInput("selected_layers exceeds total_layers")
    if h.flags & ~_KNOWN_FLAGS:
        raise InvalidInput(f"unknown flag bits {h.flags:#x}")
    if bool(h.flags & FLAG_FACTS) != bool(p.facts):
        raise InvalidInput("facts-present flag disagrees with facts section")
    indices = [r.index for r in p.layers]
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise InvalidInput("layer indices must be strictly increasing")
    if indices and (indices[0] < 0 or indices[-1] >= h.total_layers):
        raise InvalidInput("layer index outside [0, total_layers)")


def _tensor(t: PackedTensor) -> bytes:
    shape = [_check(s, _U32, "shape extent") for s in t.shape]
    return (struct.pack("<Bff4II", t.bits, t.params.scale, t.params.zero_point,
                        *shape, _check(len(t.data), _U32, "packed length")) + t.data)


def encode_facts(facts) -> bytes:
    """The facts section on its own: u16 count followed by each fact."""
    out = bytearray(struct.pack("<H", _check(len(facts), _U16, "fact count")))
    for f in facts:
        out += struct.pack("<Bf", KIND_CODES[f.kind], f.confidence)
        out += _str(f.content, "fact content")
        out += struct.pack("<B", _check(len(f.metadata), _U8, "metadata count"))
        for k, v in f.metadata:
            out += _str(k, "metadata key") + _str(v, "metadata value")
    return bytes(out)


def serialize(p: Payload) -> bytes:
    _validate(p)
    h = p.header
    out = bytearray(MAGIC)
    out += struct.pack("<BB", VERSION, h.flags)
    out += _str(h.sender_model_id, "sender_model_id")
    out += struct.pack("<HHI", _check(h.total_layers, _U16, "total_layers"),
                       _check(h.selected_layers, _U16, "selected_layers"),
                       _check(h.original_seq_len, _U32, "original_seq_len"))
    for rec in p.layers:
        out += struct.pack("<H", _check(rec.index, _U16, "layer index"))
        out += _tensor(rec.key)
        out += _tensor(rec.value)
    out += encode_facts(p.facts)
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


# -- decoding -------------------------------------------------------------------

class _Cursor:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise Truncated(f"need {n} bytes at offset {self.pos}, {self.remaining} left")
        chunk = self.data[self.pos:self.pos + n].tobytes()
        self.pos += n
        return chunk

    def read(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self, what: str) -> str:
        (n,) = self.read("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedLength(f"{what} is not valid UTF-8") from exc


def _read_tensor(cur: _Cursor) -> PackedTensor:
    bits, scale, zero_point, *shape, nbytes = cur.read("<Bff4II")
    if not 2 <= bits <= 8:
        raise MalformedLength(f"bit-width {bits} outside [2, 8]")
    if not (math.isfinite(scale) and scale > 0 and math.isfinite(zero_point)):
        raise MalformedLength("invalid quantization parameters")
    count = math.prod(shape)
    if nbytes != packed_size(count, bits):
        raise MalformedLength(f"packed length {nbytes} inconsistent with shape {shape} at {bits} bits")
    data = cur.take(nbytes)
    if not padding_is_zero(data, bits, count):
        raise MalformedLength("non-zero padding bits")
    return PackedTensor(data, bits, count, QuantParams(bits, scale, zero_point), tuple(shape))


def _read_facts(cur: _Cursor) -> tuple[Fact, ...]:
    (n_facts,) = cur.read("<H")
    facts = []
    for _ in range(n_facts):
        code, confidence = cur.read("<Bf")
        if code >= len(KINDS) or not 0.0 <= confidence <= 1.0:
            raise MalformedLength("invalid fact kind or confidence")
        content = cur.text("fact content")
        if not content:
            raise MalformedLength("empty fact content")
        (n_meta,) = cur.read("<B")
        meta = tuple((cur.text("metadata key"), cur.text("metadata value")) for _ in range(n_meta))
        facts.append(Fact(KINDS[code], content, confidence, meta))
    return tuple(facts)


def decode_facts(data: bytes) -> tuple[Fact, ...]:
    cur = _Cursor(bytes(data))
    facts = _read_facts(cur)
    if cur.remaining:
        raise MalformedLength("trailing bytes after facts section")
    return facts


def deserialize(data: bytes) -> Payload:
    """Decode and validate a payload; raises a :class:`WireError` subclass on any defect."""
    data = bytes(data)
    cur = _Cursor(data)
    if cur.take(4) != MAGIC:
        raise BadMagic("payload does not start with QKVC")
    version, flags = cur.read("<BB")
    if version != VERSION:
        raise UnsupportedVersion(f"payload version {version} (supported: {VERSION})")
    if flags & ~_KNOWN_FLAGS:
        raise MalformedLength(f"unknown flag bits {flags:#x}")
    model_id = cur.text("sender_model_id")
    total, selected, seq_len = cur.read("<HHI")
    if selected > total:
        raise MalformedLength("selected_layers exceeds total_layers")

    layers = []
    last = -1
    for _ in range(selected):
        (index,) = cur.read("<H")
        if index <= last or index >= total:
            raise MalformedLength(f"layer index {index} out of order or range")
        last = index
        layers.append(LayerRecord(index, _read_tensor(cur), _read_tensor(cur)))

    facts = _read_facts(cur)
    if bool(flags & FLAG_FACTS) != bool(facts):
        raise MalformedLength("facts-present flag disagrees with facts section")

    body_end = cur.pos
    (crc,) = cur.read("<I")
    if cur.remaining:
        raise MalformedLength(f"{cur.remaining} trailing bytes after checksum")
    if zlib.crc32(data[:body_end]) != crc:
        raise CrcMismatch("checksum does not match payload body")
    return Payload(PayloadHeader(model_id, total, selected, seq_len, flags),
                   tuple(layers), tuple(facts), crc)


# -- size model -----------------------------------------------------------------

def facts_section_size(facts) -> int:
    size = 2
    for f in facts:
        size += 1 + 4 + 2 + len(f.content.encode("utf-8")) + 1
        size += sum(4 + len(k.encode("utf-8")) + len(v.encode("utf-8")) for k, v in f.metadata)
    return size


def payload_size(sender_model_id: str, numel_per_tensor, bits_per_layer, facts=()) -> int:
    """Predicted serialized length without encoding anything.

    ``numel_per_tensor`` is either one element count shared by every
    layer or a sequence of ``(key_numel, value_numel)`` pairs aligned with
    ``bits_per_layer``.
    """
    bits_per_layer = list(bits_per_layer)
    if isinstance(numel_per_tensor, int):
        numels = [(numel_per_tensor, numel_per_tensor)] * len(bits_per_layer)
    else:
        numels = list(numel_per_tensor)
    size = HEADER_FIXED + len(sender_model_id.encode("utf-8"))
    for (nk, nv), b in zip(numels, bits_per_layer, strict=True):
        size += LAYER_OVERHEAD + packed_size(nk, b) + packed_size(nv, b)
    return size + facts_section_size(facts) + CRC_SIZE

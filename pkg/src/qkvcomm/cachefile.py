"""On-disk KV cache container (``.qkvt``).

    "QKVT" | u8 version | str model_id (u16 length + UTF-8) | u16 n_layers
    | u32 batch | u32 heads | u32 seq | u32 head_dim | u16 index x n_layers
    | float32 LE data: layer by layer, key then value, row-major
"""

from __future__ import annotations

import math
import os
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, InvalidInput, MalformedLength, Truncated, UnsupportedVersion
from .kv_model import KvCache

MAGIC = b"QKVT"
VERSION = 1


def dump_cache(cache: KvCache) -> bytes:
    if not cache.uniform_seq:
        raise InvalidInput("cache files need one sequence length shared by all layers")
    shape = cache.shape or (0, 0, 0, 0)
    model = cache.model_id.encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<BH", VERSION, len(model)) + model
    out += struct.pack("<H4I", cache.num_layers, *shape)
    out += struct.pack(f"<{cache.num_layers}H", *cache.indices)
    for k, v in cache.layers:
        out += k.astype("<f4").tobytes() + v.astype("<f4").tobytes()
    return bytes(out)


def load_cache(data: bytes) -> KvCache:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if n > len(view) - pos:
            raise Truncated("cache file ends early")
        chunk = view[pos:pos + n].tobytes()
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise BadMagic("not a QKVT cache file")
    version, n_model = struct.unpack("<BH", take(3))
    if version != VERSION:
        raise UnsupportedVersion(f"cache file version {version}")
    try:
        model_id = take(n_model).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedLength("model id is not UTF-8") from exc
    n_layers, *shape = struct.unpack("<H4I", take(18))
    indices = struct.unpack(f"<{n_layers}H", take(2 * n_layers))
    numel = math.prod(shape)
    if len(view) - pos != n_layers * 2 * numel * 4:
        raise MalformedLength("tensor data length does not match header")
    layers = []
    for _ in range(n_layers):
        k = np.frombuffer(take(numel * 4), dtype="<f4").reshape(shape)
        v = np.frombuffer(take(numel * 4), dtype="<f4").reshape(shape)
        layers.append((k, v))
    sparse = tuple(indices) != tuple(range(n_layers))
    return KvCache(tuple(layers), model_id, tuple(indices) if sparse else None)


def write_cache(path: str | os.PathLike, cache: KvCache) -> None:
    Path(path).write_bytes(dump_cache(cache))


def read_cache(path: str | os.PathLike) -> KvCache:
    return load_cache(Path(path).read_bytes())

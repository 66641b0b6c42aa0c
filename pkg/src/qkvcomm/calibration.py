"""Zero-shot cross-model calibration by per-layer moment matching.

A profile stores the mean and population standard deviation of a model's
keys and values, either per head_dim channel or as one pooled scalar.
Sender tensors are standardized with the sender's moments and rescaled to
the receiver's.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInput,
    InvalidInput,
    MalformedLength,
    ModeMismatch,
    BadMagic,
    Truncated,
    UnsupportedVersion,
)
from .kv_model import KvCache

PER_DIMENSION = "per-dimension"
SCALAR = "scalar"
MODES = (PER_DIMENSION, SCALAR)
SIGMA_FLOOR = 1e-6

PROFILE_MAGIC = b"QKVP"
PROFILE_VERSION = 1
_MODE_CODES = {PER_DIMENSION: 0, SCALAR: 1}


@dataclass(frozen=True)
class Moments:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if mu.ndim != 1 or mu.shape != sigma.shape or mu.size == 0:
            raise DimensionMismatch("mu and sigma must be equal-length non-empty vectors")
        if not (np.isfinite(mu).all() and np.isfinite(sigma).all()) or (sigma <= 0).any():
            raise InvalidInput("moments must be finite with sigma > 0")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def size(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class LayerStats:
    key: Moments
    value: Moments


@dataclass(frozen=True)
class CalibrationProfile:
    model_id: str
    per_layer: tuple[LayerStats, ...]
    mode: str = PER_DIMENSION

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInput(f"unknown calibration mode {self.mode!r}")
        if not self.per_layer:
            raise EmptyInput("profile has no layers")
        if self.mode == SCALAR and any(s.key.size != 1 or s.value.size != 1 for s in self.per_layer):
            raise DimensionMismatch("scalar profiles hold one value per statistic")

    def layer(self, index: int) -> LayerStats:
        """Statistics for original layer ``index``; a single pooled entry serves every layer."""
        if len(self.per_layer) == 1:
            return self.per_layer[0]
        if not 0 <= index < len(self.per_layer):
            raise DimensionMismatch(f"profile has no layer {index}")
        return self.per_layer[index]


def _moments(samples: list[np.ndarray], axis) -> Moments:
    data = np.concatenate([s.astype(np.float64) for s in samples], axis=0)
    mu = data.mean(axis=axis)
    sigma = np.sqrt(np.square(data - mu).mean(axis=axis))
    return Moments(np.atleast_1d(mu), np.maximum(np.atleast_1d(sigma), SIGMA_FLOOR))


def compute_profile(caches: Sequence[KvCache], mode: str = PER_DIMENSION,
                    pooled: bool = False, model_id: str | None = None) -> CalibrationProfile:
    """Per-layer key/value moments over a calibration set.

    With ``pooled=True`` (scalar mode only) all layers collapse into one
    global entry, used when sender and receiver differ in depth.
    """
    if mode not in MODES:
        raise InvalidInput(f"unknown calibration mode {mode!r}")
    if pooled and mode != SCALAR:
        raise ModeMismatch("layer pooling requires scalar mode")
    if not caches or any(c.num_layers == 0 for c in caches):
        raise EmptyInput("calibration set is empty")
    n_layers = caches[0].num_layers
    b, h, _, d = caches[0].shape
    for c in caches:
        cb, ch, _, cd = c.shape
        if c.num_layers != n_layers or (cb, ch, cd) != (b, h, d):
            raise DimensionMismatch("calibration caches disagree on layer count or shape")

    if mode == PER_DIMENSION:
        def flat(t):
            return t.reshape(-1, d)
        axis = 0
    else:
        def flat(t):
            return t.reshape(-1)
        axis = None

    if pooled:
        keys = [flat(k) for c in caches for k, _ in c.layers]
        values = [flat(v) for c in caches for _, v in c.layers]
        stats = (LayerStats(_moments(keys, axis), _moments(values, axis)),)
    else:
        stats = tuple(
            LayerStats(_moments([flat(c.layers[l][0]) for c in caches], axis),
                       _moments([flat(c.layers[l][1]) for c in caches], axis))
            for l in range(n_layers)
        )
    return CalibrationProfile(model_id if model_id is not None else caches[0].model_id, stats, mode)


def calibrate(kv, sender: Moments, receiver: Moments) -> np.ndarray:
    """``(kv - mu_s) / sigma_s * sigma_r + mu_r``, broadcast over head_dim."""
    x = np.asarray(kv, dtype=np.float32)
    if (sender.size == 1) != (receiver.size == 1):
        raise ModeMismatch("sender and receiver statistics use different modes")
    if sender.size > 1:
        if sender.size != receiver.size or x.shape[-1] != sender.size:
            raise DimensionMismatch(
                f"per-dimension stats of size {sender.size}/{receiver.size} "
                f"cannot apply to head_dim {x.shape[-1]}")
    out = (x.astype(np.float64) - sender.mu) / sender.sigma * receiver.sigma + receiver.mu
    return out.astype(np.float32)


def calibrate_cache(cache: KvCache, sender: CalibrationProfile,
                    receiver: CalibrationProfile) -> KvCache:
    if sender.mode != receiver.mode:
        raise ModeMismatch(f"sender profile is {sender.mode}, receiver is {receiver.mode}")
    layers = []
    for idx, (k, v) in zip(cache.indices, cache.layers):
        s, r = sender.layer(idx), receiver.layer(idx)
        layers.append((calibrate(k, s.key, r.key), calibrate(v, s.value, r.value)))
    return KvCache(tuple(layers), cache.model_id, cache.layer_indices)


def select_mode(sender_dims: tuple[int, int], receiver_dims: tuple[int, int]) -> str:
    """Pick a mode from ``(num_layers, head_dim)`` of each model."""
    if any(int(x) <= 0 for x in (*sender_dims, *receiver_dims)):
        raise InvalidInput("model dimensions must be positive")
    return PER_DIMENSION if tuple(sender_dims) == tuple(receiver_dims) else SCALAR


def build_profiles(sender_caches: Sequence[KvCache], receiver_caches: Sequence[KvCache]):
    """Compatible ``(sender, receiver)`` profiles for two calibration sets."""
    if not sender_caches or not receiver_caches:
        raise EmptyInput("calibration set is empty")
    s, r = sender_caches[0], receiver_caches[0]
    mode = select_mode((s.num_layers, s.shape[3]), (r.num_layers, r.shape[3]))
    pooled = s.num_layers != r.num_layers
    return (compute_profile(sender_caches, mode, pooled),
            compute_profile(receiver_caches, mode, pooled))


# -- persistence --------------------------------------------------------------

def _put_str(buf: bytearray, text: str) -> None:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise InvalidInput("string too long to encode")
    buf += struct.pack("<H", len(raw)) + raw


def _put_vec(buf: bytearray, vec: np.ndarray) -> None:
    buf += struct.pack("<I", vec.size) + vec.astype("<f4").tobytes()


def dump_profile(profile: CalibrationProfile) -> bytes:
    buf = bytearray(PROFILE_MAGIC)
    buf += struct.pack("<BB", PROFILE_VERSION, _MODE_CODES[profile.mode])
    _put_str(buf, profile.model_id)
    buf += struct.pack("<H", len(profile.per_layer))
    for st in profile.per_layer:
        for vec in (st.key.mu, st.key.sigma, st.value.mu, st.value.sigma):
            _put_vec(buf, vec)
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n > len(self.data) - self.pos:
            raise Truncated(f"need {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n].tobytes()
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_profile(data: bytes) -> CalibrationProfile:
    r = _Reader(data)
    if r.take(4) != PROFILE_MAGIC:
        raise BadMagic("not a calibration profile")
    version, mode_code = r.unpack("<BB")
    if version != PROFILE_VERSION:
        raise UnsupportedVersion(f"profile version {version}")
    modes = {v: k for k, v in _MODE_CODES.items()}
    if mode_code not in modes:
        raise MalformedLength(f"unknown mode code {mode_code}")
    (n,) = r.unpack("<H")
    try:
        model_id = r.take(n).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedLength("model id is not UTF-8") from exc
    (n_layers,) = r.unpack("<H")
    layers = []
    for _ in range(n_layers):
        vecs = []
        for _ in range(4):
            (size,) = r.unpack("<I")
            vecs.append(np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float64))
        try:
            layers.append(LayerStats(Moments(vecs[0], vecs[1]), Moments(vecs[2], vecs[3])))
        except InvalidInput as exc:
            raise MalformedLength(str(exc)) from exc
    if r.pos != len(data):
        raise MalformedLength("trailing bytes after profile")
    try:
        return CalibrationProfile(model_id, tuple(layers), modes[mode_code])
    except InvalidInput as exc:
        raise MalformedLength(str(exc)) from exc

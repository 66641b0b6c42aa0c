"""Byte-budgeted LRU cache with optional disk spill, and pressure-driven bit selection.

Recency is tracked with a monotonic access counter rather than wall-clock
time.  When resident bytes exceed ``eviction_threshold * capacity`` the
least recently accessed entries are evicted (to ``spill_dir`` when set)
until usage is back at or below the threshold.
"""

from __future__ import annotations

import os
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import xxhash

from .errors import DiskIOFailure, InvalidInput, OversizedEntry
from .quantizer import check_bit_triple

EMPTY_HASH = 0xEF46DB3751D8E999  # content_hash(b"")


def content_hash(data: bytes) -> int:
    """64-bit xxHash64 (seed 0) of ``data``."""
    return xxhash.xxh64_intdigest(bytes(data))


@dataclass
class CacheEntry:
    key: int
    size: int
    last_access: int
    location: str  # "memory" | "disk"
    value: bytes | None = None


class MemoryCache:
    """Thread-safe LRU store keyed by 64-bit content hashes.

    Args:
        capacity: byte budget for memory-resident values.
        eviction_threshold: fraction of ``capacity`` that triggers eviction.
        spill_dir: directory for evicted entries; ``None`` drops them instead.
    """

    def __init__(self, capacity: int, eviction_threshold: float = 0.8,
                 spill_dir: str | os.PathLike | None = None):
        if capacity <= 0:
            raise InvalidInput("capacity must be positive")
        if not 0.0 < eviction_threshold <= 1.0:
            raise InvalidInput("eviction_threshold must lie in (0, 1]")
        self.capacity = int(capacity)
        self.eviction_threshold = float(eviction_threshold)
        self.spill_dir = Path(spill_dir) if spill_dir else None
        if self.spill_dir is not None:
            self.spill_dir.mkdir(parents=True, exist_ok=True)
        self.used = 0
        self._clock = 0
        self._entries: dict[int, CacheEntry] = {}
        self._resident: OrderedDict[int, None] = OrderedDict()  # LRU first
        self._lock = threading.RLock()
        self.evictions: list[int] = []

    # -- helpers ----------------------------------------------------------------

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def _spill_path(self, key: int) -> Path:
        return self.spill_dir / f"{key:016x}"

    def _over(self) -> bool:
        return self.used > self.eviction_threshold * self.capacity

    def _evict_until_ok(self, protect: int) -> None:
        while self._over():
            victim = next((k for k in self._resident if k != protect), None)
            if victim is None:
                return
            entry = self._entries[victim]
            del self._resident[victim]
            self.used -= entry.size
            self.evictions.append(victim)
            if self.spill_dir is not None:
                try:
                    self._spill_path(victim).write_bytes(entry.value)
                except OSError as exc:
                    raise DiskIOFailure(f"cannot spill entry {victim:016x}: {exc}") from exc
                entry.location = "disk"
                entry.value = None
            else:
                del self._entries[victim]

    def _discard(self, key: int) -> None:
        entry = self._entries.pop(key, None)
        if entry is None:
            return
        if entry.location == "memory":
            del self._resident[key]
            self.used -= entry.size
        else:
            self._spill_path(key).unlink(missing_ok=True)

    # -- public API -------------------------------------------------------------

    def put(self, key: int, value: bytes) -> None:
        value = bytes(value)
        if len(value) == 0:
            raise InvalidInput("cache values must be non-empty")
        if len(value) > self.capacity:
            raise OversizedEntry(f"{len(value)} bytes exceeds capacity {self.capacity}")
        with self._lock:
            self._discard(key)
            self._entries[key] = CacheEntry(key, len(value), self._tick(), "memory", value)
            self._resident[key] = None
            self.used += len(value)
            self._evict_until_ok(protect=key)

    def get(self, key: int) -> bytes | None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                return None
            entry.last_access = self._tick()
            if entry.location == "disk":
                path = self._spill_path(key)
                try:
                    entry.value = path.read_bytes()
                    path.unlink()
                except OSError as exc:
                    raise DiskIOFailure(f"cannot load spilled entry {key:016x}: {exc}") from exc
                entry.location = "memory"
                self.used += entry.size
                self._resident[key] = None
                self._evict_until_ok(protect=key)
            else:
                self._resident.move_to_end(key)
            return entry.value

    def __contains__(self, key: int) -> bool:
        with self._lock:
            return key in self._entries

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def entry(self, key: int) -> CacheEntry | None:
        with self._lock:
            return self._entries.get(key)

    @property
    def usage(self) -> float:
        with self._lock:
            return self.used / self.capacity

    def put_content(self, value: bytes) -> int:
        """Store ``value`` under its content hash and return the key."""
        key = content_hash(value)
        self.put(key, value)
        return key


# -- adaptive compression -------------------------------------------------------

BitTriple = tuple[int, int, int]


@dataclass(frozen=True)
class PressurePolicy:
    """Usage bands, each ``(lower_bound, (max_bits, target_bits, min_bits))``."""

    bands: tuple[tuple[float, BitTriple], ...] = (
        (0.0, (8, 8, 6)),
        (0.5, (8, 6, 4)),
        (0.8, (6, 4, 2)),
    )

    def __post_init__(self):
        if not self.bands or self.bands[0][0] != 0.0:
            raise InvalidInput("first pressure band must start at 0.0")
        bounds = [b for b, _ in self.bands]
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise InvalidInput("pressure thresholds must be strictly increasing")
        for _, triple in self.bands:
            check_bit_triple(*triple)
        for (_, hi), (_, lo) in zip(self.bands, self.bands[1:]):
            if any(b > a for a, b in zip(hi, lo)):
                raise InvalidInput("bit-widths must not rise with memory pressure")


def pressure_to_bits(usage_fraction: float, policy: PressurePolicy = PressurePolicy()) -> BitTriple:
    """Bit triple of the highest band whose lower bound is <= ``usage_fraction``."""
    if not 0.0 <= usage_fraction <= 1.0:
        raise InvalidInput(f"usage must lie in [0, 1], got {usage_fraction}")
    chosen = policy.bands[0][1]
    for bound, triple in policy.bands:
        if usage_fraction >= bound:
            chosen = triple
    return chosen


class AdaptiveCompressionManager:
    """Picks quantization bit-widths from the current fill level of a cache."""

    def __init__(self, cache: MemoryCache, policy: PressurePolicy = PressurePolicy()):
        self.cache = cache
        self.policy = policy

    def current_bits(self) -> BitTriple:
        return pressure_to_bits(min(self.cache.usage, 1.0), self.policy)

"""Brute-force model of the byte-budgeted LRU policy, used as a test oracle.

Deliberately naive: victims are found by a linear scan for the smallest
access stamp instead of by list order.
"""

import numpy as np

from qkvcomm.errors import OversizedEntry
from qkvcomm.memory import MemoryCache


class ReferenceLru:
    def __init__(self, capacity, threshold=0.8, spill=False):
        self.capacity = capacity
        self.threshold = threshold
        self.spill = spill
        self.clock = 0
        self.entries = {}  # key -> [size, stamp, location, value]
        self.evictions = []

    @property
    def used(self):
        return sum(e[0] for e in self.entries.values() if e[2] == "memory")

    def _evict(self, protect):
        while self.used > self.threshold * self.capacity:
            resident = [(e[1], k) for k, e in self.entries.items() if e[2] == "memory" and k != protect]
            if not resident:
                return
            _, victim = min(resident)
            self.evictions.append(victim)
            if self.spill:
                self.entries[victim][2] = "disk"
            else:
                del self.entries[victim]

    def put(self, key, value):
        if len(value) > self.capacity:
            raise OversizedEntry("too big")
        self.clock += 1
        self.entries[key] = [len(value), self.clock, "memory", value]
        self._evict(key)

    def get(self, key):
        e = self.entries.get(key)
        if e is None:
            return None
        self.clock += 1
        e[1] = self.clock
        if e[2] == "disk":
            e[2] = "memory"
            self._evict(key)
        return e[3]

    def snapshot(self):
        return {k: e[2] for k, e in self.entries.items()}


def cache_snapshot(cache: MemoryCache):
    return {k: cache.entry(k).location for k in list(cache._entries)}


def run_sequence(rng, capacity, n_ops, spill_dir=None, threshold=0.8):
    """Drive both models with one random op sequence; return a mismatch message or None."""
    impl = MemoryCache(capacity, threshold, spill_dir)
    ref = ReferenceLru(capacity, threshold, spill=spill_dir is not None)
    keys = [int(k) for k in rng.integers(0, 2**64, size=int(rng.integers(2, 12)), dtype=np.uint64)]
    for step in range(n_ops):
        key = keys[int(rng.integers(len(keys)))]
        if rng.random() < 0.55:
            size = int(rng.integers(1, capacity + capacity // 10 + 2))
            value = rng.integers(0, 256, size=size, dtype=np.uint8).tobytes()
            outcomes = []
            for target in (impl, ref):
                try:
                    target.put(key, value)
                    outcomes.append("ok")
                except OversizedEntry:
                    outcomes.append("oversized")
            if outcomes[0] != outcomes[1]:
                return f"step {step}: put outcome {outcomes}"
        else:
            got, want = impl.get(key), ref.get(key)
            if got != want:
                return f"step {step}: get({key:#x}) differs"
        if impl.used != ref.used:
            return f"step {step}: used {impl.used} != {ref.used}"
        if impl.evictions != ref.evictions:
            return f"step {step}: eviction order differs"
        if cache_snapshot(impl) != ref.snapshot():
            return f"step {step}: resident sets differ"
        over = impl.used > threshold * capacity
        if over and sum(1 for loc in cache_snapshot(impl).values() if loc == "memory") != 1:
            return f"step {step}: over threshold with more than one resident entry"
    return None

"""Tensor and KV cache data model, plus a seeded synthetic cache generator.

Tensors are plain ``numpy.float32`` arrays with four axes
``(batch, heads, seq, head_dim)`` in C (row-major) order.  The synthetic
generator stands in for running a real model: each layer is filled with
normal samples of a configurable mean and standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, InvalidInput, InvalidSpec, NonFiniteInput

Shape = tuple[int, int, int, int]


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Coerce ``data`` into a contiguous, finite, 4-axis float32 tensor."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != math.prod(shape):
            raise DimensionMismatch(f"{arr.size} elements do not fill shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim != 4:
        raise DimensionMismatch(f"tensor must have 4 axes, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteInput("tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class KvCache:
    """Per-layer ``(key, value)`` tensors for one model and one context.

    ``layer_indices`` records the original layer number of each entry. It is
    ``None`` for a full cache and set for the sparse caches a receiver
    rebuilds from a payload.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    model_id: str = ""
    layer_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        layers = tuple((as_tensor(k), as_tensor(v)) for k, v in self.layers)
        object.__setattr__(self, "layers", layers)
        if self.layer_indices is not None:
            idx = tuple(int(i) for i in self.layer_indices)
            if len(idx) != len(layers):
                raise InvalidInput("layer_indices length differs from layer count")
            if any(b <= a for a, b in zip(idx, idx[1:])) or (idx and idx[0] < 0):
                raise InvalidInput("layer_indices must be non-negative and strictly increasing")
            object.__setattr__(self, "layer_indices", idx)
        ref = None
        for k, v in layers:
            if k.shape != v.shape:
                raise DimensionMismatch(f"key shape {k.shape} != value shape {v.shape}")
            # seq may differ per layer: integrating a sparse payload extends only some layers
            outer = k.shape[:2] + k.shape[3:]
            if ref is None:
                ref = outer
            elif outer != ref:
                raise DimensionMismatch(f"layer shape {k.shape} disagrees on batch/heads/head_dim")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def shape(self) -> Shape | None:
        """Per-tensor shape of the first layer, or ``None`` for an empty cache."""
        return self.layers[0][0].shape if self.layers else None

    @property
    def uniform_seq(self) -> bool:
        return len({k.shape[2] for k, _ in self.layers}) <= 1

    @property
    def indices(self) -> tuple[int, ...]:
        if self.layer_indices is None:
            return tuple(range(len(self.layers)))
        return self.layer_indices

    @property
    def nbytes(self) -> int:
        """Size of all tensors as uncompressed fp32."""
        return sum(k.nbytes + v.nbytes for k, v in self.layers)

    def equals(self, other: "KvCache") -> bool:
        if self.model_id != other.model_id or self.indices != other.indices:
            return False
        if self.num_layers != other.num_layers:
            return False
        return all(
            np.array_equal(k1, k2) and np.array_equal(v1, v2)
            for (k1, v1), (k2, v2) in zip(self.layers, other.layers)
        )


@dataclass(frozen=True)
class AttentionMap:
    """Non-negative attention weights indexed ``[layer, head, position]``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        if w.ndim != 3:
            raise DimensionMismatch(f"attention map must be (L, H, T), got {w.shape}")
        if not np.isfinite(w).all() or (w < 0).any():
            raise InvalidInput("attention weights must be finite and non-negative")
        object.__setattr__(self, "weights", w)

    @property
    def num_layers(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class SyntheticSpec:
    num_layers: int
    num_heads: int
    seq_len: int
    head_dim: int
    per_layer_mean: tuple[float, ...] = field(default=())
    per_layer_std: tuple[float, ...] = field(default=())
    seed: int = 0
    batch: int = 1
    model_id: str = "synthetic"

    def validate(self) -> None:
        for name in ("num_layers", "num_heads", "seq_len", "head_dim", "batch"):
            if int(getattr(self, name)) <= 0:
                raise InvalidSpec(f"{name} must be positive")
        if len(self.per_layer_mean) != self.num_layers:
            raise InvalidSpec("per_layer_mean needs one entry per layer")
        if len(self.per_layer_std) != self.num_layers:
            raise InvalidSpec("per_layer_std needs one entry per layer")
        if not all(math.isfinite(m) for m in self.per_layer_mean):
            raise InvalidSpec("per_layer_mean entries must be finite")
        if not all(math.isfinite(s) and s > 0 for s in self.per_layer_std):
            raise InvalidSpec("per_layer_std entries must be finite and > 0")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidSpec("seed must be a 64-bit unsigned integer")

    @classmethod
    def uniform(cls, num_layers: int, num_heads: int, seq_len: int, head_dim: int,
                mean: float = 0.0, std: float = 1.0, seed: int = 0, **kw) -> "SyntheticSpec":
        return cls(num_layers, num_heads, seq_len, head_dim,
                   (mean,) * num_layers, (std,) * num_layers, seed, **kw)


def generate_cache(spec: SyntheticSpec) -> KvCache:
    """Draw a KvCache whose layer ``l`` is N(per_layer_mean[l], per_layer_std[l])."""
    spec.validate()
    rng = np.random.default_rng(int(spec.seed))
    shape = (spec.batch, spec.num_heads, spec.seq_len, spec.head_dim)
    layers = []
    for mean, std in zip(spec.per_layer_mean, spec.per_layer_std):
        k = (rng.standard_normal(shape) * std + mean).astype(np.float32)
        v = (rng.standard_normal(shape) * std + mean).astype(np.float32)
        layers.append((k, v))
    return KvCache(tuple(layers), spec.model_id)


def generate_attention(cache: KvCache, seed: int) -> AttentionMap:
    """Seeded attention weights with a per-layer activity level.

    Each layer draws an activity level in [0.25, 1.75); weights are
    exponential samples scaled by it, so mean attention differs across
    layers the way it does in real models.
    """
    if cache.num_layers == 0:
        raise EmptyInput("cannot generate attention for an empty cache")
    _, heads, seq, _ = cache.shape
    rng = np.random.default_rng(int(seed))
    activity = rng.uniform(0.25, 1.75, size=(cache.num_layers, 1, 1))
    weights = rng.exponential(1.0, size=(cache.num_layers, heads, seq)) * activity / max(seq, 1)
    return AttentionMap(weights.astype(np.float32))


def tensor_stats(t) -> tuple[float, float, float, float]:
    """Return ``(min, max, mean, std)``; moments use float64 accumulation.

    ``std`` is the population standard deviation.
    """
    arr = np.asarray(t, dtype=np.float32)
    if arr.size == 0:
        raise EmptyInput("tensor is empty")
    wide = arr.astype(np.float64)
    mean = wide.mean()
    std = np.sqrt(max(np.mean(np.square(wide - mean)), 0.0))
    return (float(arr.min()), float(arr.max()),
            float(np.float32(mean)), float(np.float32(std)))

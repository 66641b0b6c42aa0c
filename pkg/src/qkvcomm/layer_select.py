"""Hybrid attention / positional-prior layer ranking and selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyInput, InvalidInput, LengthMismatch
from .kv_model import AttentionMap


@dataclass(frozen=True)
class SelectionConfig:
    alpha: float = 0.5
    gamma_mu: float = 0.5
    gamma_sigma: float = 0.25
    ratio: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInput(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.gamma_mu < 1.0:
            raise InvalidInput(f"gamma_mu must lie in (0, 1), got {self.gamma_mu}")
        if not 0.0 < self.gamma_sigma <= 1.0:
            raise InvalidInput(f"gamma_sigma must lie in (0, 1], got {self.gamma_sigma}")
        if not 0.0 < self.ratio <= 1.0:
            raise InvalidInput(f"ratio must lie in (0, 1], got {self.ratio}")


@dataclass(frozen=True)
class LayerScores:
    attention: tuple[float, ...]
    prior: tuple[float, ...]
    combined: tuple[float, ...]


def attention_importance(attn: AttentionMap) -> list[float]:
    """Mean attention weight of each layer over all heads and positions."""
    w = attn.weights
    if w.size == 0:
        raise EmptyInput("attention map is empty")
    return [float(x) for x in w.astype(np.float64).mean(axis=(1, 2))]


def gaussian_prior(num_layers: int, cfg: SelectionConfig) -> list[float]:
    """Bell-shaped weight over zero-based layer indices, centred at gamma_mu * L."""
    if num_layers < 1:
        raise InvalidInput("num_layers must be >= 1")
    mu = cfg.gamma_mu * num_layers
    sigma = cfg.gamma_sigma * num_layers
    return [math.exp(-((l - mu) ** 2) / (2.0 * sigma * sigma)) for l in range(num_layers)]


def combined_scores(attention: Sequence[float], prior: Sequence[float], alpha: float) -> list[float]:
    if len(attention) != len(prior):
        raise LengthMismatch(f"{len(attention)} attention scores vs {len(prior)} prior weights")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInput(f"alpha must lie in [0, 1], got {alpha}")
    return [alpha * a + (1.0 - alpha) * p for a, p in zip(attention, prior)]


def kept_count(num_layers: int, ratio: float) -> int:
    """``ceil(ratio * L)`` clamped to [1, L].

    The product is rounded to 9 decimals first so float noise such as
    ``0.1 * 30 == 3.0000000000000004`` does not add a layer.
    """
    return min(num_layers, max(1, math.ceil(round(ratio * num_layers, 9))))


def select_layers(scores: Sequence[float], ratio: float) -> list[int]:
    """Indices of the highest-scoring layers, sorted ascending.

    Ties go to the lower index.
    """
    if len(scores) == 0:
        raise EmptyInput("no layer scores")
    if not 0.0 < ratio <= 1.0:
        raise InvalidInput(f"ratio must lie in (0, 1], got {ratio}")
    k = kept_count(len(scores), ratio)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:k])


def score_layers(attn: AttentionMap, cfg: SelectionConfig) -> LayerScores:
    a = attention_importance(attn)
    p = gaussian_prior(len(a), cfg)
    return LayerScores(tuple(a), tuple(p), tuple(combined_scores(a, p, cfg.alpha)))

"""``key = value`` config files shared by every CLI command.

Lines are UTF-8; ``#`` starts a comment; there are no sections.  Unknown
keys are rejected and each value is converted by its key's type.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import InvalidInput
from .kv_model import SyntheticSpec
from .layer_select import SelectionConfig

ENV_VAR = "QKVCOMM_CONFIG"


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


KEYS = {
    # layer selection
    "alpha": float,
    "gamma_mu": float,
    "gamma_sigma": float,
    "layer_ratio": float,
    # quantizer
    "max_bits": int,
    "target_bits": int,
    "min_bits": int,
    "probe_bits": int,
    # memory
    "cache_capacity_bytes": int,
    "eviction_threshold": float,
    "spill_dir": str,
    # synthetic cache
    "num_layers": int,
    "num_heads": int,
    "seq_len": int,
    "head_dim": int,
    "batch": int,
    "per_layer_mean": _floats,
    "per_layer_std": _floats,
    "seed": int,
    "model_id": str,
    # pipeline / bench
    "facts_budget": int,
    "sweep_bits": _ints,
}


def parse_config(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise InvalidInput(f"{source}:{lineno}: expected 'key = value'")
        if key not in KEYS:
            raise InvalidInput(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = KEYS[key](value)
        except ValueError as exc:
            raise InvalidInput(f"{source}:{lineno}: bad value for {key}: {value!r}") from exc
    return out


def load_config(path: str | os.PathLike | None) -> dict:
    """Load ``path``, falling back to ``$QKVCOMM_CONFIG``; no path means empty config."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InvalidInput(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def selection_from(cfg: dict) -> SelectionConfig:
    return SelectionConfig(
        alpha=cfg.get("alpha", 0.5),
        gamma_mu=cfg.get("gamma_mu", 0.5),
        gamma_sigma=cfg.get("gamma_sigma", 0.25),
        ratio=cfg.get("layer_ratio", 0.7),
    )


def bits_from(cfg: dict) -> tuple[int, int, int]:
    return cfg.get("max_bits", 8), cfg.get("target_bits", 6), cfg.get("min_bits", 4)


def spec_from(cfg: dict) -> SyntheticSpec:
    missing = [k for k in ("num_layers", "num_heads", "seq_len", "head_dim") if k not in cfg]
    if missing:
        raise InvalidInput(f"synthetic spec is missing {', '.join(missing)}")
    n = cfg["num_layers"]
    return SyntheticSpec(
        num_layers=n,
        num_heads=cfg["num_heads"],
        seq_len=cfg["seq_len"],
        head_dim=cfg["head_dim"],
        per_layer_mean=cfg.get("per_layer_mean", (0.0,) * n),
        per_layer_std=cfg.get("per_layer_std", (1.0,) * n),
        seed=cfg.get("seed", 0),
        batch=cfg.get("batch", 1),
        model_id=cfg.get("model_id", "synthetic"),
    )

"""Hyperparameters shared by every stage of the pipeline.

A single :class:`HyperParams` object drives data batching, the model, the
losses, training, and the index. Configs are stored as flat ``key = value``
UTF-8 text so they can be diffed and edited by hand.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Raised when a config violates one or more invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class HyperParams:
    # ── Model ───────────────────────────────────────────────
    d_model: int = 384
    n_prototypes: int = 30
    n_agg_iters: int = 1
    n_heads: int = 4
    clip_units: int = 32
    max_frames: int = 128
    ffn_mult: int = 2

    # ── Losses ──────────────────────────────────────────────
    mask_ratio: float = 0.3
    lambda_ret: float = 1.0
    lambda_nce: float = 0.03
    lambda_crecon: float = 0.1
    lambda_urecon: float = 1.0
    lambda_attn: float = 0.005
    lambda_ortho: float = 0.01
    beta: float = 0.2
    triplet_margin: float = 0.2
    nce_scale: float = 1.0
    crecon_scale: float = 1.0

    # ── Retrieval ───────────────────────────────────────────
    fusion_weight: float = 0.5

    # ── Training ────────────────────────────────────────────
    batch_size: int = 128
    learning_rate: float = 1e-4
    mix_probability: float = 0.5
    mix_subsample: int = 2
    seed: int = 0

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_config() -> HyperParams:
    """Preset matching the published TVR hyperparameters."""
    return HyperParams()


def desk_config(**overrides) -> HyperParams:
    """Small preset that trains on a laptop CPU in minutes."""
    base = HyperParams(
        d_model=64,
        n_prototypes=8,
        n_heads=4,
        clip_units=16,
        max_frames=64,
        batch_size=16,
        learning_rate=1e-3,
    )
    return base.replace(**overrides)


_POSITIVE_INTS = (
    "d_model", "n_prototypes", "n_agg_iters", "n_heads", "clip_units",
    "max_frames", "ffn_mult", "batch_size", "mix_subsample",
)
_NONNEG_REALS = (
    "lambda_ret", "lambda_nce", "lambda_crecon", "lambda_urecon",
    "lambda_attn", "lambda_ortho", "triplet_margin",
)
_UNIT_REALS = ("fusion_weight", "mix_probability")


def config_violations(config: HyperParams) -> list[str]:
    """Every invariant the config breaks, one message per violation."""
    out = []
    for name in _POSITIVE_INTS:
        value = getattr(config, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            out.append(f"{name} ≥ 1 (got {value!r})")
    for name in _NONNEG_REALS:
        value = getattr(config, name)
        if not _finite(value) or value < 0:
            out.append(f"{name} ≥ 0 (got {value!r})")
    for name in _UNIT_REALS:
        value = getattr(config, name)
        if not _finite(value) or not 0.0 <= value <= 1.0:
            out.append(f"{name} ∈ [0,1] (got {value!r})")
    if not _finite(config.mask_ratio) or not 0.0 < config.mask_ratio <= 1.0:
        out.append(f"mask_ratio ∈ (0,1] (got {config.mask_ratio!r})")
    if not _finite(config.beta) or not 0.0 <= config.beta < 0.5:
        out.append(f"beta ∈ [0,0.5) (got {config.beta!r})")
    for name in ("learning_rate", "nce_scale", "crecon_scale"):
        value = getattr(config, name)
        if not _finite(value) or value <= 0:
            out.append(f"{name} > 0 (got {value!r})")
    if not isinstance(config.seed, int) or isinstance(config.seed, bool):
        out.append(f"seed must be an integer (got {config.seed!r})")
    d, h = config.d_model, config.n_heads
    if isinstance(d, int) and isinstance(h, int) and d >= 1 and h >= 1 and d % h:
        out.append(f"d_model divisible by n_heads (got {d} % {h} = {d % h})")
    return out


def validate(config: HyperParams) -> HyperParams:
    """Return ``config`` unchanged, or raise :class:`ConfigError` listing every violation."""
    violations = config_violations(config)
    if violations:
        raise ConfigError(violations)
    return config


def _finite(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


# ── Serialization ───────────────────────────────────────────

_FIELD_TYPES = {f.name: f.type for f in fields(HyperParams)}


def _parse_value(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError([f"unknown config key {key!r}"])
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError([f"{key}: cannot parse {raw!r} as {kind}"]) from None
    return raw


def dumps(config: HyperParams) -> str:
    lines = [f"{key} = {value!r}" for key, value in config.to_dict().items()]
    return "\n".join(lines) + "\n"


def loads(text: str, base: HyperParams | None = None) -> HyperParams:
    """Parse flat ``key = value`` text; keys not present keep ``base`` values."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected 'key = value'"])
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw)
    return (base or default_config()).replace(**values)


def save(config: HyperParams, path) -> None:
    Path(path).write_text(dumps(config), encoding="utf-8")


def load(path, base: HyperParams | None = None) -> HyperParams:
    return loads(Path(path).read_text(encoding="utf-8"), base)


def apply_overrides(config: HyperParams, overrides: list[str]) -> HyperParams:
    """Apply ``key=value`` strings as given on the command line."""
    values = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not key=value"])
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(key.strip(), raw)
    return config.replace(**values)

"""JSON run configuration.

A run config is a JSON object with optional sections ``data``, ``model``,
``train``, ``ransac`` and ``loss`` plus a top-level ``seed``. Each section's
keys must be fields of the matching dataclass; anything else is rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .pose import RansacConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 4
    n_views: int = 4
    height: int = 32
    width: int = 32
    fov_deg: float = 60.0
    ring_radius: float = 3.0
    min_primitives: int = 2
    max_primitives: int = 5
    extent: float = 2.0
    ground_plane: bool = False
    # scenes where some view sees less foreground than this are redrawn
    min_view_coverage: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_scenes < 0 or self.n_views < 1:
            raise ValueError("need n_scenes >= 0 and n_views >= 1")
        if self.height < 8 or self.width < 8:
            raise ValueError("images must be at least 8x8")
        if not 0 <= self.min_view_coverage < 1:
            raise ValueError("min_view_coverage must lie in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int | None = None


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig,
             "ransac": RansacConfig, "loss": LossConfig}


def _build(cls, values, section):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}' section: {e}") from e


def parse_config(obj) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(obj) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    parts = {name: _build(cls, obj.get(name, {}), name) for name, cls in _SECTIONS.items()}
    seed = obj.get("seed")
    if seed is not None and (not isinstance(seed, int) or seed < 0):
        raise ConfigError("seed must be a non-negative integer")
    return RunConfig(seed=seed, **parts)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e
    return parse_config(obj)


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    """Apply a seed override to every seeded section."""
    seed = seed if seed is not None else cfg.seed
    if seed is None:
        return cfg
    return replace(
        cfg,
        seed=seed,
        data=replace(cfg.data, seed=seed),
        train=replace(cfg.train, seed=seed),
        ransac=replace(cfg.ransac, seed=seed),
    )

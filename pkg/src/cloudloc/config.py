"""Run configuration: every pipeline tunable with file-based overrides.

Precedence is CLI flag > config file > the defaults below. The effective
config is embedded into output artifacts (JSON fields or binary trailers)
for provenance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .image import Detector2DConfig
from .pointcloud import Descriptor3DConfig, Detector3DConfig


@dataclass
class MlesacConfig:
    iterations: int = 2000
    inlier_threshold_px: float = 4.0
    sigma_px: float = 1.0
    seed: int = 0

    def validate(self):
        if self.iterations < 1:
            raise ConfigError("mlesac.iterations must be >= 1")
        if self.inlier_threshold_px <= 0 or self.sigma_px <= 0:
            raise ConfigError("mlesac thresholds must be positive")


@dataclass
class GridConfig:
    """Hyperparameter grids for the two matcher stages."""

    coarse_max_splits: tuple = (64, 256, 1024)
    coarse_cost_ratios: tuple = (1.0, 2.0, 5.0)
    fine_n_trees: tuple = (50, 100, 200)
    fine_max_splits: tuple = (256, 1024, 4096)

    def validate(self):
        for name in ("coarse_max_splits", "fine_n_trees", "fine_max_splits"):
            vals = getattr(self, name)
            if not vals or any(int(v) < 1 for v in vals):
                raise ConfigError(f"grid.{name} must be non-empty positive integers")
        if not self.coarse_cost_ratios or any(v <= 0 for v in self.coarse_cost_ratios):
            raise ConfigError("grid.coarse_cost_ratios must be positive")


@dataclass
class RunConfig:
    # correspondence generation (alpha/beta/gamma are the published values)
    alpha: float = 5.0  # max pixel distance for a positive pair
    beta: float = 0.5  # min 3D separation for a negative pair, scene units
    gamma: float = 0.3  # min 3D descriptor distance for a negative pair
    tau: int = 5  # depth-block side, pixels (odd)
    depth_slack: float = 0.3  # occlusion slack, scene units
    negative_ratio: float = 5.0  # negatives per positive
    seed: int = 0
    splat_radius_px: int = 3
    threads: int = 1
    detector2d: Detector2DConfig = field(default_factory=Detector2DConfig)
    detector3d: Detector3DConfig = field(default_factory=Detector3DConfig)
    descriptor3d: Descriptor3DConfig = field(default_factory=Descriptor3DConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    mlesac: MlesacConfig = field(default_factory=MlesacConfig)

    def validate(self) -> "RunConfig":
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("beta/gamma must be non-negative")
        if self.tau < 1 or self.tau % 2 == 0:
            raise ConfigError("tau must be odd and >= 1")
        if self.depth_slack <= 0:
            raise ConfigError("depth_slack must be positive")
        if self.negative_ratio <= 0:
            raise ConfigError("negative_ratio must be positive")
        if self.splat_radius_px < 0:
            raise ConfigError("splat_radius_px must be >= 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.detector2d.contrast_threshold <= 0:
            raise ConfigError("detector2d.contrast_threshold must be positive")
        if self.detector2d.edge_ratio <= 0:
            raise ConfigError("detector2d.edge_ratio must be positive")
        if self.detector3d.response_threshold < 0:
            raise ConfigError("detector3d.response_threshold must be >= 0")
        self.grid.validate()
        self.mlesac.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "detector2d": Detector2DConfig,
    "detector3d": Detector3DConfig,
    "descriptor3d": Descriptor3DConfig,
    "grid": GridConfig,
    "mlesac": MlesacConfig,
}


def _apply(target, values: dict, path: str):
    known = {f.name for f in fields(target)}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if key in _SECTIONS and isinstance(target, RunConfig):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            _apply(getattr(target, key), val, f"{key}.")
        else:
            current = getattr(target, key)
            if isinstance(current, tuple) and isinstance(val, list):
                val = tuple(val)
            setattr(target, key, val)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional JSON file, and optional
    override dict (highest precedence). Validates before returning."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        _apply(cfg, data, "")
    if overrides:
        _apply(cfg, overrides, "")
    return cfg.validate()

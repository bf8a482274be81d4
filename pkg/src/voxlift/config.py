"""Run configuration: pipeline shape, depth bins, optimizer and evaluation knobs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .depthnet import DepthBins
from .geometry import VoxelGridSpec
from .lifting import LiftingConfig
from .sparse_volume import PipelineConfig

PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class RunConfig:
    stages: str = "5x5x2:100,10x10x4:25,20x20x8:25"
    channels: int = 16
    num_classes: int = 3
    d_min: float = 0.5
    d_max: float = 5.0
    depth_bins: int = 12
    nearby_views: int = 2
    points: int = 4
    heads: int = 1
    lifting_mode: str = "deform3d"
    view_attention: bool = True
    head_hidden: int = 32
    occupancy_weight: float = 0.5
    depth_weight: float = 1.0
    oriented: bool = False
    lr: float = 0.05
    momentum: float = 0.9
    cosine: bool = True
    clip_norm: float = 5.0
    steps: int = 2000
    seed: int = 0
    precision: str = "float64"
    grid_origin: tuple = (-2.0, -2.0, 0.0)
    grid_extent: tuple = (4.0, 4.0, 1.6)
    score_thresh: float = 0.05
    nms_iou: float = 0.25
    max_candidates: int = 200

    def __post_init__(self):
        object.__setattr__(self, "grid_origin", tuple(float(x) for x in self.grid_origin))
        object.__setattr__(self, "grid_extent", tuple(float(x) for x in self.grid_extent))
        if self.occupancy_weight < 0:
            raise ValueError("occupancy loss weight must be nonnegative")
        if self.depth_weight < 0:
            raise ValueError("depth loss weight must be nonnegative")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if min(self.grid_extent) <= 0:
            raise ValueError("grid extent must be positive")
        # fail early on malformed stage strings and lifting settings
        self.pipeline
        self.lifting
        self.bins

    @property
    def pipeline(self) -> PipelineConfig:
        return PipelineConfig.parse(self.stages, self.channels)

    @property
    def lifting(self) -> LiftingConfig:
        return LiftingConfig(self.channels, self.points, self.heads, self.lifting_mode, self.view_attention)

    @property
    def bins(self) -> DepthBins:
        return DepthBins(self.d_min, self.d_max, self.depth_bins)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def finest_grid(self) -> VoxelGridSpec:
        dims = self.pipeline.base_dims
        size = tuple(e / d for e, d in zip(self.grid_extent, dims))
        return VoxelGridSpec(self.grid_origin, dims, size)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

"""Coarse-to-fine sparse volume construction with box-derived occupancy labels."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .geometry import VoxelGridSpec, upsample_spec
from .numerics import ParameterStore, Tensor

BCE_EPS = 1e-7


@dataclass(frozen=True)
class SelectionSet:
    """Selected voxels as sorted linear indices into an (X, Y, Z) grid."""

    linear: np.ndarray
    dims: tuple

    @property
    def indices(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.linear, self.dims), axis=-1)

    def __len__(self) -> int:
        return len(self.linear)


@dataclass
class VolumeStage:
    spec: VoxelGridSpec
    features: Tensor  # (X, Y, Z, C)
    occupancy: Tensor | None  # (X, Y, Z); None for the dense coarse stage
    selection: SelectionSet
    init_features: Tensor | None = None


@dataclass(frozen=True)
class PipelineConfig:
    """Stage resolutions and selection ratios, coarsest first."""

    stage_dims: tuple
    ratios: tuple
    channels: int

    def __post_init__(self):
        if len(self.stage_dims) != len(self.ratios) or not self.stage_dims:
            raise ValueError("need one ratio per stage")
        if self.ratios[0] != 100:
            raise ValueError("the coarse stage is always built densely (100%)")
        for r in self.ratios:
            if not 0 < r <= 100:
                raise ValueError(f"selection ratio {r} outside (0, 100]")
        for a, b in zip(self.stage_dims, self.stage_dims[1:]):
            if tuple(2 * x for x in a) != tuple(b):
                raise ValueError(f"stage {b} is not a 2x upsampling of {a}")

    @property
    def L(self) -> int:
        return len(self.stage_dims) - 1

    @property
    def base_dims(self) -> tuple:
        return tuple(self.stage_dims[-1])

    @classmethod
    def parse(cls, spec: str, channels: int) -> "PipelineConfig":
        """Parse the compact form, e.g. ``"10x10x4:100,20x20x8:25,40x40x16:25"``."""
        dims, ratios = [], []
        for part in spec.replace(" ", "").split(","):
            m = re.fullmatch(r"(\d+)x(\d+)x(\d+):(\d+(?:\.\d+)?)", part)
            if not m:
                raise ValueError(f"bad stage entry {part!r}")
            dims.append(tuple(int(m.group(i)) for i in range(1, 4)))
            r = float(m.group(4))
            ratios.append(int(r) if r.is_integer() else r)
        return cls(tuple(dims), tuple(ratios), channels)

    def stage_specs(self, finest: VoxelGridSpec) -> list[VoxelGridSpec]:
        if tuple(finest.dims) != self.base_dims:
            raise ValueError(f"grid dims {finest.dims} do not match stage spec {self.base_dims}")
        scale = 2 ** self.L
        spec = VoxelGridSpec(finest.origin, self.stage_dims[0], tuple(s * scale for s in finest.voxel_size))
        specs = [spec]
        for _ in range(self.L):
            spec = upsample_spec(spec)
            specs.append(spec)
        return specs


def topk_count(ratio_k: float, n: int) -> int:
    # the epsilon keeps exact products such as 25% of 25600 from rounding up
    return max(1, min(n, math.ceil(ratio_k / 100.0 * n - 1e-9)))


def select_topk(occupancy, ratio_k: float) -> SelectionSet:
    """The ceil(ratio·n) most occupied voxels; ties go to the lower linear index."""
    if not 0 < ratio_k <= 100:
        raise ValueError(f"selection ratio {ratio_k} outside (0, 100]")
    occ = np.asarray(occupancy.data if isinstance(occupancy, Tensor) else occupancy)
    flat = occ.reshape(-1)
    k = topk_count(ratio_k, flat.size)
    order = np.argsort(-flat, kind="stable")
    return SelectionSet(np.sort(order[:k]), tuple(occ.shape))


def occupancy_head(features, store: ParameterStore, name: str = "occ") -> Tensor:
    """Per-voxel linear C→1 followed by a sigmoid."""
    features = nx.as_tensor(features)
    C = features.shape[-1]
    w = store.get(f"{name}.w", (1, C))
    b = store.get(f"{name}.b", (1,), fan_in=C)
    logit = nx.linear(features, w, b)
    return nx.sigmoid(nx.reshape(logit, features.shape[:-1]))


def upsample_nearest(features) -> Tensor:
    """Copy each voxel's feature to its 8 children."""
    features = nx.as_tensor(features)
    X, Y, Z, C = features.shape
    ix, iy, iz = np.meshgrid(np.arange(2 * X) // 2, np.arange(2 * Y) // 2, np.arange(2 * Z) // 2, indexing="ij")
    parent = (ix * Y + iy) * Z + iz
    return nx.take_rows(nx.reshape(features, (X * Y * Z, C)), parent)


def dense_stage(spec: VoxelGridSpec, aggregator, label: str = "stage0") -> VolumeStage:
    centers = spec.centers().reshape(-1, 3)
    feats = aggregator(centers, stage=label)
    C = feats.shape[-1]
    sel = SelectionSet(np.arange(spec.num_voxels), spec.dims)
    return VolumeStage(spec, nx.reshape(feats, spec.dims + (C,)), None, sel)


def refine_stage(prev: VolumeStage, aggregator, store: ParameterStore, ratio_k: float,
                 level: int, max_dims: tuple | None = None) -> VolumeStage:
    """Upsample, score occupancy, and add aggregated features at the top-k voxels."""
    spec = upsample_spec(prev.spec)
    if max_dims is not None and any(a > b for a, b in zip(spec.dims, max_dims)):
        raise ValueError(f"refinement to {spec.dims} exceeds the finest grid {max_dims}")
    init = upsample_nearest(prev.features)
    occ = occupancy_head(init, store, name=f"occ{level}")
    sel = select_topk(occ, ratio_k)
    C = init.shape[-1]
    residual = aggregator(spec.centers_at(sel.indices), stage=f"stage{level}")
    flat = nx.index_add(nx.reshape(init, (spec.num_voxels, C)), sel.linear, residual)
    return VolumeStage(spec, nx.reshape(flat, spec.dims + (C,)), occ, sel, init_features=init)


def build_volume(aggregator, store: ParameterStore, config: PipelineConfig,
                 finest: VoxelGridSpec) -> list[VolumeStage]:
    """All L+1 stages, from the dense coarse volume to the finest one."""
    specs = config.stage_specs(finest)
    stages = [dense_stage(specs[0], aggregator)]
    for level in range(1, config.L + 1):
        stages.append(refine_stage(stages[-1], aggregator, store, config.ratios[level], level,
                                   max_dims=config.base_dims))
    return stages


def aggregation_counts_closed_form(config: PipelineConfig) -> list[int]:
    """Points aggregated per stage implied by the stage spec alone."""
    out = []
    for dims, r in zip(config.stage_dims, config.ratios):
        n = dims[0] * dims[1] * dims[2]
        out.append(n if r == 100 else topk_count(r, n))
    return out


def points_in_box(points: np.ndarray, center, size, yaw: float) -> np.ndarray:
    """Inclusive containment test of (..., 3) points in a yawed box."""
    c, s = math.cos(yaw), math.sin(yaw)
    d = np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    lx = c * d[..., 0] + s * d[..., 1]
    ly = -s * d[..., 0] + c * d[..., 1]
    half = np.asarray(size, dtype=np.float64) / 2
    return (np.abs(lx) <= half[0]) & (np.abs(ly) <= half[1]) & (np.abs(d[..., 2]) <= half[2])


def pseudo_occupancy(grid: VoxelGridSpec, boxes) -> np.ndarray:
    """1 where the voxel center lies inside any box, else 0."""
    centers = grid.centers()
    labels = np.zeros(grid.dims, dtype=np.uint8)
    for box in boxes:
        if min(box.size) <= 0:
            raise ValueError(f"degenerate box size {box.size}")
        labels |= points_in_box(centers, box.center, box.size, box.yaw)
    return labels


def occupancy_loss(stages, labels) -> Tensor:
    """Sum over refinement stages of mean binary cross entropy."""
    total = nx.Tensor(0.0)
    refined = [s for s in stages if s.occupancy is not None]
    if len(refined) != len(labels):
        raise ValueError(f"{len(refined)} refinement stages but {len(labels)} label grids")
    for stage, lab in zip(refined, labels):
        lab = np.asarray(lab, dtype=np.float64)
        if stage.occupancy.shape != lab.shape:
            raise ValueError(f"occupancy {stage.occupancy.shape} vs labels {lab.shape}")
        total = total + bce(stage.occupancy, lab)
    return total


def bce(prob, target: np.ndarray) -> Tensor:
    p = nx.clip(prob, BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(target, dtype=np.float64)
    ll = nx.add(nx.mul(nx.log(p), t), nx.mul(nx.log(nx.sub(1.0, p)), 1.0 - t))
    return -nx.mean(ll)

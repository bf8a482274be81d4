"""Adaptive sparse 3D volumes from posed multi-view images for indoor box detection."""

from .config import RunConfig
from .depthnet import DepthBins, DepthNet
from .detection import Box3D, EvalReport, ScoredBox, evaluate_map
from .geometry import CameraView, Extrinsics, Intrinsics, VoxelGridSpec
from .lifting import Aggregator, GeometryContextLifting, LiftingConfig
from .numerics import ParameterStore, Tensor
from .sparse_volume import PipelineConfig, build_volume

__all__ = [
    "Aggregator", "Box3D", "CameraView", "DepthBins", "DepthNet", "EvalReport", "Extrinsics",
    "GeometryContextLifting", "Intrinsics", "LiftingConfig", "ParameterStore", "PipelineConfig",
    "RunConfig", "ScoredBox", "Tensor", "VoxelGridSpec", "build_volume", "evaluate_map",
]
__version__ = "0.1.0"

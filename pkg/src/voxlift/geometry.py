"""Pinhole cameras, pixel-space projection and voxel grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BEHIND_EPS = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Extrinsics:
    """World-to-camera rigid transform: q = R p + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant 1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Extrinsics":
        """Camera at ``eye`` looking at ``target``; camera x right, y down, z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        # re-orthonormalize so the 1e-9 checks hold exactly enough
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return cls(R, -R @ eye)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def translated(self, offset) -> "Extrinsics":
        # shifting the world by +offset moves the camera center by +offset
        return Extrinsics(self.R, self.t - self.R @ np.asarray(offset, dtype=np.float64))


@dataclass(frozen=True)
class CameraView:
    """A posed camera. Intrinsics are given at image resolution."""

    intrinsics: Intrinsics
    extrinsics: Extrinsics
    image_size: tuple  # (H, W)
    feature_size: tuple  # (h, w)

    def __post_init__(self):
        H, W = self.image_size
        h, w = self.feature_size
        if H % h or W % w or H // h != W // w:
            raise ValueError(f"feature size {self.feature_size} is not an integral stride of {self.image_size}")

    @property
    def stride(self) -> int:
        return self.image_size[0] // self.feature_size[0]

    @property
    def feature_intrinsics(self) -> Intrinsics:
        s = 1.0 / self.stride
        return self.intrinsics.scaled(s, s)

    def translated(self, offset) -> "CameraView":
        return CameraView(self.intrinsics, self.extrinsics.translated(offset), self.image_size, self.feature_size)


@dataclass(frozen=True)
class PixelSpacePoint:
    u: float
    v: float
    d: float
    valid: bool


def project_points(points: np.ndarray, view: CameraView):
    """Project world points (..., 3) to feature-map pixel space.

    Returns ``(uvd, valid)`` where ``uvd`` is (..., 3) holding (u, v, depth).
    Invalid entries (depth <= 1e-9) carry zeros.
    """
    K = view.feature_intrinsics
    E = view.extrinsics
    q = np.asarray(points, dtype=np.float64) @ E.R.T + E.t
    z = q[..., 2]
    valid = z > BEHIND_EPS
    safe = np.where(valid, z, 1.0)
    u = np.where(valid, K.fx * q[..., 0] / safe + K.cx, 0.0)
    v = np.where(valid, K.fy * q[..., 1] / safe + K.cy, 0.0)
    d = np.where(valid, z, 0.0)
    return np.stack([u, v, d], axis=-1), valid


def project_point(p, view: CameraView) -> PixelSpacePoint:
    uvd, valid = project_points(np.asarray(p, dtype=np.float64)[None], view)
    if not valid[0]:
        return PixelSpacePoint(0.0, 0.0, 0.0, False)
    u, v, d = uvd[0]
    return PixelSpacePoint(float(u), float(v), float(d), True)


def unproject(uvd: np.ndarray, view: CameraView) -> np.ndarray:
    """Inverse of :func:`project_points` for (..., 3) pixel-space coordinates."""
    K = view.feature_intrinsics
    E = view.extrinsics
    uvd = np.asarray(uvd, dtype=np.float64)
    d = uvd[..., 2]
    q = np.stack([(uvd[..., 0] - K.cx) / K.fx * d, (uvd[..., 1] - K.cy) / K.fy * d, d], axis=-1)
    return (q - E.t) @ E.R


def in_view_mask(uvd: np.ndarray, valid: np.ndarray, view: CameraView, depth_range) -> np.ndarray:
    h, w = view.feature_size
    d_min, d_max = depth_range
    u, v, d = uvd[..., 0], uvd[..., 1], uvd[..., 2]
    return valid & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1) & (d >= d_min) & (d <= d_max)


def in_view(pp: PixelSpacePoint, view: CameraView, depth_range) -> bool:
    if not pp.valid:
        return False
    uvd = np.array([pp.u, pp.v, pp.d])
    return bool(in_view_mask(uvd, np.array(True), view, depth_range))


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple
    dims: tuple
    voxel_size: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "dims", tuple(int(x) for x in self.dims))
        object.__setattr__(self, "voxel_size", tuple(float(x) for x in self.voxel_size))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"grid dims must be three positive counts, got {self.dims}")
        if min(self.voxel_size) <= 0:
            raise ValueError("voxel size must be positive")

    @property
    def num_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims) * np.asarray(self.voxel_size)

    def centers(self) -> np.ndarray:
        """All voxel centers as an (X, Y, Z, 3) array."""
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij"), axis=-1)
        return np.asarray(self.origin) + (idx + 0.5) * np.asarray(self.voxel_size)

    def centers_at(self, index: np.ndarray) -> np.ndarray:
        """Centers for an (n, 3) integer index array."""
        return np.asarray(self.origin) + (np.asarray(index) + 0.5) * np.asarray(self.voxel_size)

    def translated(self, offset) -> "VoxelGridSpec":
        return VoxelGridSpec(tuple(np.asarray(self.origin) + np.asarray(offset)), self.dims, self.voxel_size)


def voxel_center(grid: VoxelGridSpec, index) -> np.ndarray:
    index = tuple(int(i) for i in index)
    if any(i < 0 or i >= n for i, n in zip(index, grid.dims)):
        raise IndexError(f"voxel index {index} outside dims {grid.dims}")
    return grid.centers_at(np.asarray(index))


def upsample_spec(grid: VoxelGridSpec) -> VoxelGridSpec:
    return VoxelGridSpec(grid.origin, tuple(2 * n for n in grid.dims), tuple(s / 2 for s in grid.voxel_size))


def nearest_views(views, ref_index: int, K: int) -> list[int]:
    """The K other views whose camera centers are closest to the reference."""
    n = len(views)
    if K >= n:
        raise ValueError(f"need K < number of views, got K={K} with {n} views")
    ref = views[ref_index].extrinsics.center
    dist = [(float(np.linalg.norm(v.extrinsics.center - ref)), i) for i, v in enumerate(views) if i != ref_index]
    dist.sort()
    return [i for _, i in dist[:K]]

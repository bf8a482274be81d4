"""Per-view depth distributions from plane-sweep matching and a monocular branch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .geometry import CameraView, nearest_views, project_points

WARP_TOL = 1e-6
from .numerics import ParameterStore, Tensor


@dataclass(frozen=True)
class DepthBins:
    d_min: float
    d_max: float
    D: int

    def __post_init__(self):
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")
        if self.D < 2:
            raise ValueError("need at least two depth bins")

    @property
    def spacing(self) -> float:
        return (self.d_max - self.d_min) / self.D

    @property
    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.D) + 0.5) * self.spacing


def metric_to_bin_coord(d, bins: DepthBins):
    """Continuous bin index of metric depth ``d``, clamped to [0, D-1]."""
    coord = (np.asarray(d, dtype=np.float64) - bins.d_min) / bins.spacing - 0.5
    out = np.clip(coord, 0.0, bins.D - 1)
    return float(out) if np.ndim(out) == 0 else out


def _ref_rays(view: CameraView) -> np.ndarray:
    h, w = view.feature_size
    K = view.feature_intrinsics
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def warp_coords(depths, ref: CameraView, src: CameraView):
    """Source-view sampling positions for every reference pixel and depth plane.

    Returns ``(uv, inside)`` with ``uv`` of shape (P, h, w, 2) and a boolean
    mask of samples that land inside the source feature map in front of it.
    """
    depths = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    rays = _ref_rays(ref)
    E = ref.extrinsics
    cam = rays[None] * depths[:, None, None, None]
    world = (cam - E.t) @ E.R
    uvd, valid = project_points(world, src)
    h, w = src.feature_size
    u, v = uvd[..., 0], uvd[..., 1]
    # a hair of slack so border pixels survive the round trip at identical poses
    inside = valid & (u >= -WARP_TOL) & (u <= w - 1 + WARP_TOL) & (v >= -WARP_TOL) & (v <= h - 1 + WARP_TOL)
    return uvd[..., :2], inside


def bilinear_gather(feat, uv: np.ndarray, inside: np.ndarray) -> Tensor:
    """Bilinearly sample an (h, w, C) map at (..., 2) positions; outside → zeros."""
    feat = nx.as_tensor(feat)
    h, w, c = feat.shape
    u = np.clip(uv[..., 0], 0, w - 1)
    v = np.clip(uv[..., 1], 0, h - 1)
    u0 = np.clip(np.floor(u), 0, max(w - 2, 0)).astype(np.int64)
    v0 = np.clip(np.floor(v), 0, max(h - 2, 0)).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu, fv = u - u0, v - v0
    idx = np.stack([v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1], axis=-1)
    wts = np.stack([(1 - fv) * (1 - fu), (1 - fv) * fu, fv * (1 - fu), fv * fu], axis=-1)
    wts = wts * inside[..., None]
    corners = nx.take_rows(nx.reshape(feat, (h * w, c)), idx)
    return nx.tsum(nx.mul(corners, wts[..., None]), axis=-2)


def warp_features(src_feat, d_i: float, ref: CameraView, src: CameraView) -> Tensor:
    """Warp source features onto the reference view at the fronto-parallel plane ``d_i``."""
    if tuple(ref.feature_size) != tuple(src.feature_size):
        raise ValueError("views must share the feature-map resolution")
    uv, inside = warp_coords([d_i], ref, src)
    return bilinear_gather(src_feat, uv[0], inside[0])


def warp_stack(src_feat, bins: DepthBins, ref: CameraView, src: CameraView) -> Tensor:
    """Warped source features for every depth plane, shape (D, h, w, C)."""
    uv, inside = warp_coords(bins.centers, ref, src)
    return bilinear_gather(src_feat, uv, inside)


def build_cost_volume(ref_feat, warped) -> Tensor:
    """Mean over nearby views of the scaled feature correlation.

    ``warped`` is a list of (D, h, w, C) stacks, one per nearby view. The
    result has shape (h, w, D).
    """
    if len(warped) == 0:
        raise ValueError("cost volume needs at least one nearby view")
    ref_feat = nx.as_tensor(ref_feat)
    c = ref_feat.shape[-1]
    total = None
    for stack_ in warped:
        corr = nx.tsum(nx.mul(stack_, ref_feat), axis=-1)  # (D, h, w)
        total = corr if total is None else total + corr
    vol = total * (1.0 / (len(warped) * math.sqrt(c)))
    return nx.transpose(vol, (1, 2, 0))


def cost_volume_for_view(feats, views, ref_index: int, bins: DepthBins, K: int) -> Tensor:
    if len(views) < K + 1:
        raise ValueError(f"need at least {K + 1} views, got {len(views)}")
    nbrs = nearest_views(views, ref_index, K)
    warped = [warp_stack(feats[k], bins, views[ref_index], views[k]) for k in nbrs]
    return build_cost_volume(feats[ref_index], warped)


class DepthNet:
    """Monocular and plane-sweep branches fused into per-pixel bin logits.

    Each branch is a per-pixel linear layer with ReLU (C→C on features, D→D
    on the cost volume); the decoder maps the concatenation to D logits.
    """

    def __init__(self, channels: int, bins: DepthBins, K: int = 2, prefix: str = "depth"):
        self.C = channels
        self.bins = bins
        self.K = K
        self.prefix = prefix

    def init_params(self, store: ParameterStore) -> None:
        C, D, p = self.C, self.bins.D, self.prefix
        store.get(f"{p}.mono.w", (C, C))
        store.get(f"{p}.mono.b", (C,), fan_in=C)
        store.get(f"{p}.multi.w", (D, D))
        store.get(f"{p}.multi.b", (D,), fan_in=D)
        store.get(f"{p}.dec.w", (D, C + D))
        store.get(f"{p}.dec.b", (D,), fan_in=C + D)

    def logits(self, ref_feat, cost_volume, store: ParameterStore) -> Tensor:
        self.init_params(store)
        p = self.prefix
        mono = nx.relu(nx.linear(ref_feat, store[f"{p}.mono.w"], store[f"{p}.mono.b"]))
        multi = nx.relu(nx.linear(cost_volume, store[f"{p}.multi.w"], store[f"{p}.multi.b"]))
        return nx.linear(nx.concat([mono, multi], axis=-1), store[f"{p}.dec.w"], store[f"{p}.dec.b"])

    def forward_view(self, ref_feat, cost_volume, store: ParameterStore) -> Tensor:
        return nx.softmax(self.logits(ref_feat, cost_volume, store), axis=-1)

    def __call__(self, feats, views, store: ParameterStore, cost_volumes=None) -> list[Tensor]:
        """Depth distributions (h, w, D) for every view."""
        if len(views) < self.K + 1:
            raise ValueError(f"need at least {self.K + 1} views, got {len(views)}")
        out = []
        for n in range(len(views)):
            cv = cost_volumes[n] if cost_volumes is not None else cost_volume_for_view(
                feats, views, n, self.bins, self.K)
            out.append(self.forward_view(feats[n], cv, store))
        return out


def depth_forward(feats, views, ref_index: int, params: ParameterStore, bins: DepthBins,
                  K: int = 2) -> Tensor:
    """Depth distribution (h, w, D) for view ``ref_index`` given all view features."""
    if len(views) < K + 1:
        raise ValueError(f"need at least {K + 1} views, got {len(views)}")
    net = DepthNet(nx.as_tensor(feats[ref_index]).shape[-1], bins, K)
    cv = cost_volume_for_view(feats, views, ref_index, bins, K)
    return net.forward_view(feats[ref_index], cv, params)


def depth_supervision_loss(dist: Tensor, gt_depth: np.ndarray, bins: DepthBins) -> Tensor:
    """Cross-entropy of the distribution against the bin containing ``gt_depth``."""
    target = np.clip(((gt_depth - bins.d_min) / bins.spacing).astype(np.int64), 0, bins.D - 1)
    h, w, D = dist.shape
    onehot = np.zeros((h, w, D))
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    picked = nx.tsum(nx.mul(dist, onehot), axis=-1)
    return nx.mean(-nx.log(nx.clip(picked, 1e-7, 1.0)))

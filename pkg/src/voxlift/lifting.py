"""Geometry- and context-aware aggregation of multi-view features at 3D points.

Each view's 2D features are lifted lazily into its (u, v, depth-bin) pixel
space by weighting them with the view's depth distribution. A voxel center is
projected into every view, refined there with 3D deformable attention, and
the per-view results are fused with attention whose query is their mean.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .depthnet import DepthBins, metric_to_bin_coord
from .geometry import CameraView, in_view_mask, project_points
from .numerics import ParameterStore, Tensor

MODES = ("deform3d", "deform2d", "single")
CHUNK = 2048

_STENCIL = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass
class LiftedFeatureField:
    feat2d: Tensor  # (h, w, C)
    depth: Tensor  # (h, w, D)
    view: CameraView

    def __post_init__(self):
        self.feat2d = nx.as_tensor(self.feat2d)
        self.depth = nx.as_tensor(self.depth)
        if self.feat2d.shape[:2] != self.depth.shape[:2]:
            raise ValueError("feature map and depth distribution disagree spatially")

    def materialize(self) -> np.ndarray:
        """Dense (h, w, D, C) outer product; for checking only."""
        return self.depth.data[..., :, None] * self.feat2d.data[..., None, :]


def _sample_rows(feat_rows: Tensor, depth_rows: Tensor, hw_base: np.ndarray, coords, h: int, w: int,
                 D: int) -> Tensor:
    """Lazy trilinear sample of stacked lifted fields.

    ``feat_rows`` is (N*h*w, C), ``depth_rows`` (N*h*w*D, 1); ``hw_base`` holds
    ``view * h * w`` for each point, broadcastable against ``coords[..., 0]``.
    """
    index, weights = nx.corner_weights(coords, (w, h, D))
    hw = np.asarray(hw_base)[..., None] + index[..., 1] * w + index[..., 0]
    f = nx.take_rows(feat_rows, hw)
    dep = nx.take_rows(depth_rows, hw * D + index[..., 2])
    blend = nx.mul(nx.reshape(weights, weights.shape + (1,)), dep)
    return nx.tsum(nx.mul(blend, f), axis=-2)


def sample_lifted(field: LiftedFeatureField, p_pix) -> Tensor:
    """Trilinear sample of the implied feature-by-depth field at (u, v, bin)."""
    h, w, c = field.feat2d.shape
    D = field.depth.shape[-1]
    coords = nx.as_tensor(p_pix)
    single = coords.ndim == 1
    if single:
        coords = nx.reshape(coords, (1, 3))
    out = _sample_rows(nx.reshape(field.feat2d, (h * w, c)), nx.reshape(field.depth, (h * w * D, 1)),
                       np.zeros(coords.shape[:-1], dtype=np.int64), coords, h, w, D)
    return nx.reshape(out, (c,)) if single else out


@dataclass
class AggregationCounts:
    points: int = 0
    view_pairs: int = 0
    deform_samples: int = 0
    corner_fetches: int = 0

    def merge(self, other: "AggregationCounts") -> None:
        self.points += other.points
        self.view_pairs += other.view_pairs
        self.deform_samples += other.deform_samples
        self.corner_fetches += other.corner_fetches

    def as_dict(self) -> dict:
        return dict(points=self.points, view_pairs=self.view_pairs,
                    deform_samples=self.deform_samples, corner_fetches=self.corner_fetches)


@dataclass
class LiftingConfig:
    channels: int
    points: int = 4  # deformable sampling points per head
    heads: int = 1
    mode: str = "deform3d"
    view_attention: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown lifting mode {self.mode!r}")
        if self.points < 1 or self.heads < 1 or self.channels % self.heads:
            raise ValueError("need points >= 1 and heads dividing channels")


class GeometryContextLifting:
    """Parameter layout and batched math for intra-view and inter-view steps."""

    def __init__(self, cfg: LiftingConfig, prefix: str = "lift"):
        self.cfg = cfg
        self.prefix = prefix

    @property
    def samples_per_pair(self) -> int:
        return 0 if self.cfg.mode == "single" else self.cfg.heads * self.cfg.points

    def offset_bias_init(self) -> np.ndarray:
        M, H = self.cfg.points, self.cfg.heads
        rows = [_STENCIL[m % 4] * (m // 4 + 1) for m in range(M)]
        return np.tile(np.asarray(rows), (H, 1)).reshape(-1)

    def init_params(self, store: ParameterStore) -> None:
        C, HM, p = self.cfg.channels, self.cfg.heads * self.cfg.points, self.prefix
        store.get(f"{p}.value.w", (C, C))
        store.get(f"{p}.offset.w", (HM * 3, C), init="zeros")
        store.get(f"{p}.offset.b", (HM * 3,), init=self.offset_bias_init())
        store.get(f"{p}.attn.w", (HM, C), init="zeros")
        store.get(f"{p}.attn.b", (HM,), init="zeros")
        for k in ("q", "k", "v"):
            store.get(f"{p}.fuse.{k}.w", (C, C))

    # -- intra-view ----------------------------------------------------------------
    def intra(self, store: ParameterStore, sampler, base: np.ndarray) -> Tensor:
        """Deformable attention around ``base`` (P, 3) pixel-space points.

        ``sampler(coords)`` samples the lifted field for (P, ..., 3) coords.
        """
        cfg, p = self.cfg, self.prefix
        P, C = base.shape[0], cfg.channels
        query = sampler(base)
        if cfg.mode == "single":
            return query
        H, M = cfg.heads, cfg.points
        offsets = nx.reshape(nx.linear(query, store[f"{p}.offset.w"], store[f"{p}.offset.b"]), (P, H * M, 3))
        if cfg.mode == "deform2d":
            offsets = nx.mul(offsets, np.array([1.0, 1.0, 0.0]))
        logits = nx.reshape(nx.linear(query, store[f"{p}.attn.w"], store[f"{p}.attn.b"]), (P, H, M))
        attn = nx.softmax(logits, axis=-1)
        pts = nx.add(offsets, base[:, None, :])
        samples = nx.reshape(sampler(pts), (P, H, M, C))
        pooled = nx.tsum(nx.mul(samples, nx.reshape(attn, (P, H, M, 1))), axis=2)
        proj = nx.linear(pooled, store[f"{p}.value.w"])
        if H == 1:
            return nx.reshape(proj, (P, C))
        head_of = np.arange(C) // (C // H)
        mask = (head_of[None, :] == np.arange(H)[:, None]).astype(proj.dtype)
        return nx.tsum(nx.mul(proj, mask), axis=1)

    # -- inter-view ------------------------------------------------------------------
    def fuse(self, store: ParameterStore, feats, mask: np.ndarray) -> Tensor:
        """Fuse (P, N, C) per-view features where ``mask`` (P, N) marks valid views.

        Rows without any valid view come out as zero vectors.
        """
        p = self.prefix
        mask = np.asarray(mask, dtype=bool)
        feats = nx.as_tensor(feats)
        has_any = mask.any(axis=1)
        count = np.maximum(mask.sum(axis=1), 1).astype(feats.dtype)
        m = mask[..., None].astype(feats.dtype)
        avg = nx.div(nx.tsum(nx.mul(feats, m), axis=1), count[:, None])
        if not self.cfg.view_attention:
            return avg
        q = nx.linear(avg, store[f"{p}.fuse.q.w"])
        k = nx.linear(feats, store[f"{p}.fuse.k.w"])
        v = nx.linear(feats, store[f"{p}.fuse.v.w"])
        safe_mask = mask | ~has_any[:, None]
        out = nx.scaled_dot_attention(q, k, v, mask=safe_mask)
        return nx.mul(out, has_any[:, None].astype(feats.dtype))


class Aggregator:
    """Aggregates lifted multi-view features at arbitrary world points.

    Holds the per-view feature maps, depth distributions and cameras of one
    scene, and accumulates operation counts per stage label.
    """

    def __init__(self, feats, depths, views, bins: DepthBins, store: ParameterStore,
                 lifting: GeometryContextLifting, threads: int = 1):
        self.views = list(views)
        self.bins = bins
        self.store = store
        self.lifting = lifting
        self.threads = max(1, int(threads))
        self.N = len(self.views)
        f0 = nx.as_tensor(feats[0])
        self.h, self.w, self.C = f0.shape
        self.D = bins.D
        if self.C != lifting.cfg.channels:
            raise ValueError(f"features have {self.C} channels, lifting expects {lifting.cfg.channels}")
        lifting.init_params(store)
        N, h, w, C, D = self.N, self.h, self.w, self.C, self.D
        self.feat_rows = nx.reshape(nx.stack(list(feats), axis=0), (N * h * w, C))
        self.depth_rows = nx.reshape(nx.stack(list(depths), axis=0), (N * h * w * D, 1))
        self.counts: dict[str, AggregationCounts] = {}

    def _pixel_coords(self, points: np.ndarray):
        uvd = np.empty((len(points), self.N, 3))
        mask = np.zeros((len(points), self.N), dtype=bool)
        rng = (self.bins.d_min, self.bins.d_max)
        for n, view in enumerate(self.views):
            proj, valid = project_points(points, view)
            mask[:, n] = in_view_mask(proj, valid, view, rng)
            uvd[:, n] = proj
        uvd[..., 2] = np.where(mask, metric_to_bin_coord(uvd[..., 2], self.bins), 0.0)
        uvd[~mask] = 0.0
        return uvd, mask

    def _aggregate_chunk(self, points: np.ndarray):
        P = len(points)
        uvd, mask = self._pixel_coords(points)
        pt_idx, view_idx = np.nonzero(mask)
        counts = AggregationCounts(points=P, view_pairs=len(pt_idx))
        counts.deform_samples = counts.view_pairs * self.lifting.samples_per_pair
        counts.corner_fetches = 8 * counts.view_pairs * (1 + self.lifting.samples_per_pair)
        if len(pt_idx) == 0:
            return nx.Tensor(np.zeros((P, self.C), dtype=self.feat_rows.dtype)), counts
        base = uvd[pt_idx, view_idx]
        hw_base = view_idx * (self.h * self.w)

        def sampler(coords):
            coords = nx.as_tensor(coords)
            extra = coords.ndim - 2
            hb = hw_base.reshape(hw_base.shape + (1,) * extra)
            return _sample_rows(self.feat_rows, self.depth_rows, hb, coords, self.h, self.w, self.D)

        per_pair = self.lifting.intra(self.store, sampler, base)
        dense = nx.reshape(nx.scatter_rows(per_pair, pt_idx * self.N + view_idx, P * self.N), (P, self.N, self.C))
        return self.lifting.fuse(self.store, dense, mask), counts

    def __call__(self, points: np.ndarray, stage: str = "default") -> Tensor:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        tally = self.counts.setdefault(stage, AggregationCounts())
        if nx.grad_enabled() or len(points) <= CHUNK:
            out, counts = self._aggregate_chunk(points)
            tally.merge(counts)
            return out
        chunks = [points[i:i + CHUNK] for i in range(0, len(points), CHUNK)]

        def run(chunk):
            with nx.no_grad():
                return self._aggregate_chunk(chunk)

        if self.threads == 1:
            results = [run(c) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(run, chunks))
        for _, counts in results:
            tally.merge(counts)
        return nx.Tensor(np.concatenate([r.data for r, _ in results], axis=0))

    def total_counts(self) -> AggregationCounts:
        total = AggregationCounts()
        for key in sorted(self.counts):
            total.merge(self.counts[key])
        return total


# -- single-item entry points -------------------------------------------------------

def intra_view_aggregate(field: LiftedFeatureField, p_n, store: ParameterStore,
                         lifting: GeometryContextLifting, bins: DepthBins | None = None) -> Tensor:
    """Deformable attention for one view at one pixel-space point.

    ``p_n`` is (u, v, metric depth) when ``bins`` is given, else (u, v, bin).
    Invalid points raise; callers filter them out first.
    """
    if hasattr(p_n, "valid"):
        if not p_n.valid:
            raise ValueError("cannot aggregate at an invalid pixel-space point")
        p_n = (p_n.u, p_n.v, p_n.d)
    base = np.asarray(p_n, dtype=np.float64).reshape(1, 3).copy()
    if bins is not None:
        base[0, 2] = metric_to_bin_coord(base[0, 2], bins)
    lifting.init_params(store)
    out = lifting.intra(store, lambda c: sample_lifted(field, c), base)
    return nx.reshape(out, (lifting.cfg.channels,))


def inter_view_fuse(view_feats, store: ParameterStore, lifting: GeometryContextLifting) -> Tensor:
    """Fuse a list of per-view C-vectors; an empty list gives zeros."""
    C = lifting.cfg.channels
    lifting.init_params(store)
    if len(view_feats) == 0:
        return nx.Tensor(np.zeros(C))
    feats = [nx.as_tensor(f) for f in view_feats]
    # canonical order so the reduction does not depend on list order
    order = sorted(range(len(feats)), key=lambda i: tuple(feats[i].data.tolist()))
    stacked = nx.reshape(nx.stack([feats[i] for i in order], axis=0), (1, len(feats), C))
    out = lifting.fuse(store, stacked, np.ones((1, len(feats)), dtype=bool))
    return nx.reshape(out, (C,))


def aggregate_point(p, fields, store: ParameterStore, lifting: GeometryContextLifting,
                    bins: DepthBins) -> Tensor:
    """Aggregated C-vector at world point ``p`` from all lifted fields."""
    agg = Aggregator([f.feat2d for f in fields], [f.depth for f in fields], [f.view for f in fields],
                     bins, store, lifting)
    return nx.reshape(agg(np.asarray(p, dtype=np.float64).reshape(1, 3)), (lifting.cfg.channels,))

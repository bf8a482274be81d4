"""End-to-end model: depth estimation, adaptive volume construction, detection.

Also hosts the training loop, inference and the cost accounting used by the
command-line tools.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .depthnet import DepthNet, cost_volume_for_view, depth_supervision_loss
from .detection import (DetectionHead, ScoredBox, Targets, assign_targets, decode_and_nms,
                        detection_loss, evaluate_map, total_loss)
from .lifting import Aggregator, GeometryContextLifting
from .numerics import ParameterStore
from .scenesim import RenderedView, SyntheticScene
from .sparse_volume import build_volume, occupancy_loss, pseudo_occupancy


class TrainingError(RuntimeError):
    pass


@dataclass
class SceneData:
    """Everything one forward pass needs about a scene, precomputed once."""

    feats: list  # per view (h, w, C)
    gt_depths: list  # per view (h, w)
    views: list
    boxes: list
    cost_volumes: list  # per view (h, w, D); parameter-free, so cached
    occ_labels: list  # one label grid per refinement stage
    targets: Targets


def prepare_scene(scene: SyntheticScene, rendered: list[RenderedView], cfg: RunConfig) -> SceneData:
    dtype = cfg.dtype
    feats = [np.asarray(r.features, dtype=dtype) for r in rendered]
    views = [r.view for r in rendered]
    if feats[0].shape[-1] != cfg.channels:
        raise ValueError(f"scene features have {feats[0].shape[-1]} channels, config expects {cfg.channels}")
    bins = cfg.bins
    with nx.no_grad():
        cvs = [cost_volume_for_view(feats, views, n, bins, cfg.nearby_views).data for n in range(len(views))]
    specs = cfg.pipeline.stage_specs(cfg.finest_grid())
    labels = [pseudo_occupancy(spec, scene.boxes) for spec in specs[1:]]
    return SceneData(feats, [np.asarray(r.gt_depth, dtype=np.float64) for r in rendered], views,
                     list(scene.boxes), cvs, labels, assign_targets(specs[-1], scene.boxes))


# -- model --------------------------------------------------------------------------

@dataclass
class ForwardResult:
    depths: list
    stages: list
    head: object
    aggregator: Aggregator


def forward(data: SceneData, store: ParameterStore, cfg: RunConfig, threads: int = 1) -> ForwardResult:
    depth_net = DepthNet(cfg.channels, cfg.bins, cfg.nearby_views)
    depths = depth_net(data.feats, data.views, store, cost_volumes=data.cost_volumes)
    lifting = GeometryContextLifting(cfg.lifting)
    agg = Aggregator(data.feats, depths, data.views, cfg.bins, store, lifting, threads=threads)
    stages = build_volume(agg, store, cfg.pipeline, cfg.finest_grid())
    head = DetectionHead(cfg.channels, cfg.num_classes, cfg.head_hidden)(stages[-1].features, store)
    return ForwardResult(depths, stages, head, agg)


def init_store(cfg: RunConfig, data: SceneData) -> ParameterStore:
    """Create every parameter by running one forward pass without recording."""
    store = ParameterStore(cfg.seed, dtype=cfg.dtype)
    with nx.no_grad():
        forward(data, store, cfg)
    return store


def compute_losses(fwd: ForwardResult, data: SceneData, cfg: RunConfig) -> dict:
    det = detection_loss(fwd.head, data.targets, oriented=cfg.oriented)
    occ = occupancy_loss(fwd.stages, data.occ_labels)
    dep = nx.Tensor(0.0)
    for dist, gt in zip(fwd.depths, data.gt_depths):
        dep = dep + depth_supervision_loss(dist, gt, cfg.bins)
    dep = dep * (1.0 / len(fwd.depths))
    total = nx.add(total_loss(det.total, occ, cfg.occupancy_weight), nx.mul(dep, cfg.depth_weight))
    return {"center": det.center, "iou": det.iou, "cls": det.cls, "occ": occ, "depth": dep, "total": total}


# -- optimization --------------------------------------------------------------------

class SGD:
    """Gradient descent with momentum, global-norm clipping and optional cosine decay."""

    def __init__(self, store: ParameterStore, lr: float, momentum: float = 0.0, clip_norm: float | None = None,
                 total_steps: int = 0, cosine: bool = False):
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.total_steps = total_steps
        self.cosine = cosine
        self.velocity = {name: np.zeros_like(store[name].data) for name in store.names()}

    def lr_at(self, step: int) -> float:
        if not self.cosine or self.total_steps <= 0:
            return self.lr
        return 0.5 * self.lr * (1 + math.cos(math.pi * step / self.total_steps))

    def step(self, step: int) -> float:
        grads = {name: self.store.grads[name] for name in self.store.names()}
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        lr = self.lr_at(step)
        for name, g in grads.items():
            v = self.velocity[name] * self.momentum + g * scale
            self.velocity[name] = v
            p = self.store[name]
            p.data = (p.data - lr * v).astype(p.data.dtype)
        return norm


def _check_finite(step: int, losses: dict) -> None:
    for key, value in losses.items():
        if not np.isfinite(value.data).all():
            raise TrainingError(f"non-finite {key} loss at step {step}")


def train(cfg: RunConfig, scenes: list[SceneData], store: ParameterStore | None = None,
          steps: int | None = None, callback=None) -> tuple[ParameterStore, list[dict]]:
    """Train on ``scenes`` one scene per step in seeded epoch order.

    Returns the parameters and a per-step log of loss components.
    """
    if not scenes:
        raise ValueError("no training scenes")
    steps = cfg.steps if steps is None else steps
    if store is None:
        store = init_store(cfg, scenes[0])
    opt = SGD(store, cfg.lr, cfg.momentum, cfg.clip_norm, steps, cfg.cosine)
    rng = np.random.default_rng([cfg.seed, 1])
    order: list[int] = []
    log = []
    for step in range(steps):
        if not order:
            order = list(rng.permutation(len(scenes)))
        data = scenes[order.pop(0)]
        try:
            losses = compute_losses(forward(data, store, cfg), data, cfg)
            _check_finite(step, losses)
            nx.backward(losses["total"], store)
        except FloatingPointError as exc:
            raise TrainingError(f"non-finite value at step {step}: {exc}") from exc
        lr = opt.lr_at(step)
        norm = opt.step(step)
        entry = {"step": step, "lr": lr, "grad_norm": norm}
        entry.update({k: v.item() for k, v in losses.items()})
        log.append(entry)
        if callback is not None:
            callback(entry)
    return store, log


def mean_losses(cfg: RunConfig, store: ParameterStore, scenes: list[SceneData]) -> dict:
    """Average loss components over ``scenes`` without recording a graph."""
    totals: dict[str, float] = {}
    with nx.no_grad():
        for data in scenes:
            for k, v in compute_losses(forward(data, store, cfg), data, cfg).items():
                totals[k] = totals.get(k, 0.0) + v.item()
    return {k: v / len(scenes) for k, v in totals.items()}


# -- inference ---------------------------------------------------------------------------

@dataclass
class CostReport:
    """Exact operation counts of volume construction plus informational timing."""

    stage_spec: str
    points_per_stage: list
    view_pairs: int
    deform_samples: int
    corner_fetches: int
    feature_bytes: int
    scenes: int
    seconds: float | None = None

    @property
    def total_points(self) -> int:
        return int(sum(self.points_per_stage))

    def to_dict(self, timing: bool = False) -> dict:
        d = {"stage_spec": self.stage_spec, "points_per_stage": list(self.points_per_stage),
             "total_points": self.total_points, "view_pairs": self.view_pairs,
             "deform_samples": self.deform_samples, "corner_fetches": self.corner_fetches,
             "feature_bytes": self.feature_bytes, "scenes": self.scenes}
        if timing:
            d["seconds"] = self.seconds
        return d


def feature_bytes(cfg: RunConfig) -> int:
    """Resident volume-feature bytes summed over stages."""
    item = np.dtype(cfg.dtype).itemsize
    return int(sum(x * y * z * cfg.channels * item for x, y, z in cfg.pipeline.stage_dims))


def _cost_from_aggregator(cfg: RunConfig, agg: Aggregator, n_scenes: int) -> CostReport:
    labels = [f"stage{i}" for i in range(cfg.pipeline.L + 1)]
    per_stage = [agg.counts[l].points if l in agg.counts else 0 for l in labels]
    tot = agg.total_counts()
    return CostReport(cfg.stages, per_stage, tot.view_pairs, tot.deform_samples, tot.corner_fetches,
                      feature_bytes(cfg), n_scenes)


def _merge_costs(reports: list[CostReport]) -> CostReport:
    first = reports[0]
    return CostReport(first.stage_spec, [int(sum(x)) for x in zip(*(r.points_per_stage for r in reports))],
                      sum(r.view_pairs for r in reports), sum(r.deform_samples for r in reports),
                      sum(r.corner_fetches for r in reports), first.feature_bytes, len(reports),
                      sum(r.seconds or 0.0 for r in reports))


def predict(cfg: RunConfig, store: ParameterStore, data: SceneData, threads: int = 1):
    """Detections and the cost report for one scene."""
    t0 = time.perf_counter()
    with nx.no_grad():
        fwd = forward(data, store, cfg, threads)
    boxes = decode_and_nms(fwd.head, cfg.finest_grid(), cfg.score_thresh, cfg.nms_iou, cfg.max_candidates)
    cost = _cost_from_aggregator(cfg, fwd.aggregator, 1)
    cost.seconds = time.perf_counter() - t0
    return boxes, cost, fwd


def evaluate(cfg: RunConfig, store: ParameterStore, scenes: list[SceneData], threads: int = 1):
    """mAP over ``scenes`` plus the merged cost report and raw predictions."""
    if not scenes:
        raise ValueError("evaluation split is empty")
    preds, costs = [], []
    for data in scenes:
        boxes, cost, _ = predict(cfg, store, data, threads)
        preds.append(boxes)
        costs.append(cost)
    report = evaluate_map(preds, [d.boxes for d in scenes])
    return report, _merge_costs(costs), preds


def bench(configs: list[RunConfig], scenes: list[SceneData], threads: int = 1) -> list[CostReport]:
    """Inference-only volume construction per config on the same scenes."""
    if len(configs) < 2:
        raise ValueError("benchmark needs at least two configurations")
    rows = []
    for cfg in configs:
        costs = []
        for data in scenes:
            store = ParameterStore(cfg.seed, dtype=cfg.dtype)
            t0 = time.perf_counter()
            with nx.no_grad():
                depths = DepthNet(cfg.channels, cfg.bins, cfg.nearby_views)(
                    data.feats, data.views, store, cost_volumes=data.cost_volumes)
                agg = Aggregator(data.feats, depths, data.views, cfg.bins, store,
                                 GeometryContextLifting(cfg.lifting), threads=threads)
                build_volume(agg, store, cfg.pipeline, cfg.finest_grid())
            cost = _cost_from_aggregator(cfg, agg, 1)
            cost.seconds = time.perf_counter() - t0
            costs.append(cost)
        rows.append(_merge_costs(costs))
    return rows


def bench_csv(rows: list[CostReport], timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["stage_spec", "points_per_stage", "total_points", "view_pairs", "deform_samples",
            "corner_fetches", "feature_bytes", "scenes"]
    w.writerow(head + (["seconds"] if timing else []))
    for r in rows:
        line = [r.stage_spec, ";".join(str(p) for p in r.points_per_stage), r.total_points, r.view_pairs,
                r.deform_samples, r.corner_fetches, r.feature_bytes, r.scenes]
        w.writerow(line + ([f"{r.seconds:.3f}"] if timing else []))
    return buf.getvalue()


def predictions_json(preds: list[list[ScoredBox]]) -> str:
    return json.dumps([[sb.to_dict() for sb in scene] for scene in preds], indent=2, sort_keys=True)


# -- export ------------------------------------------------------------------------------

class ExportError(ValueError):
    code = 20


def volume_slice(volume: np.ndarray, axis: int, index: int) -> np.ndarray:
    """A 2D slice of an (X, Y, Z) array, or of feature norms for (X, Y, Z, C)."""
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim == 4:
        vol = np.linalg.norm(vol, axis=-1)
    if vol.ndim != 3:
        raise ExportError(f"expected a 3D volume, got shape {vol.shape}")
    if axis not in (0, 1, 2):
        raise ExportError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < vol.shape[axis]:
        raise ExportError(f"index {index} outside [0, {vol.shape[axis]}) on axis {axis}")
    return np.take(vol, index, axis=axis)


def export_slice(volume: np.ndarray, axis: int, index: int, out_path) -> np.ndarray:
    """Write a slice as CSV; nothing is written if the slice is invalid."""
    sl = volume_slice(volume, axis, index)
    out = Path(out_path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in sl:
        w.writerow([repr(float(x)) for x in row])
    fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=".slice-")
    with os.fdopen(fd, "w") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, out)
    return sl

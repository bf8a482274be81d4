"""Anchor-free per-voxel detection head, its losses, decoding and mAP."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .geometry import VoxelGridSpec
from .numerics import ParameterStore, Tensor

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
BCE_EPS = 1e-7


def wrap_angle(a: float) -> float:
    """Map an angle into [-pi, pi)."""
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple
    yaw: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))
        object.__setattr__(self, "size", tuple(float(x) for x in self.size))
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("center and size need three components")
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    def translated(self, offset) -> "Box3D":
        return Box3D(tuple(np.asarray(self.center) + np.asarray(offset)), self.size, self.yaw, self.class_id)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw, "class_id": self.class_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(d["center"], d["size"], d.get("yaw", 0.0), d.get("class_id", 0))


@dataclass(frozen=True)
class ScoredBox:
    box: Box3D
    score: float

    def to_dict(self) -> dict:
        d = self.box.to_dict()
        d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScoredBox":
        return cls(Box3D.from_dict(d), float(d["score"]))


# -- geometry of boxes ---------------------------------------------------------------

def iou3d_axis_aligned(a: Box3D, b: Box3D) -> float:
    """IoU of the boxes' axis-aligned extents (yaw is ignored)."""
    inter = 1.0
    for k in range(3):
        lo = max(a.center[k] - a.size[k] / 2, b.center[k] - b.size[k] / 2)
        hi = min(a.center[k] + a.size[k] / 2, b.center[k] + b.size[k] / 2)
        if hi <= lo:
            return 0.0
        inter *= hi - lo
    # rounding can push identical boxes a hair above one
    return min(1.0, inter / (a.volume + b.volume - inter))


def iou_one_to_many(center, size, centers: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    lo = np.maximum(np.asarray(center) - np.asarray(size) / 2, centers - sizes / 2)
    hi = np.minimum(np.asarray(center) + np.asarray(size) / 2, centers + sizes / 2)
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    return np.minimum(1.0, inter / (np.prod(size) + np.prod(sizes, axis=-1) - inter))


def _local_offsets(points: np.ndarray, box: Box3D) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = points - np.asarray(box.center)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], axis=-1)


# -- head --------------------------------------------------------------------------

@dataclass
class HeadOutput:
    raw: Tensor  # (X, Y, Z, 8 + num_classes)
    centerness: Tensor  # logits (X, Y, Z)
    distances: Tensor  # (X, Y, Z, 6): -x, -y, -z, +x, +y, +z face distances
    yaw: Tensor  # (X, Y, Z)
    class_logits: Tensor  # (X, Y, Z, num_classes)

    @classmethod
    def from_raw(cls, raw) -> "HeadOutput":
        raw = nx.as_tensor(raw)
        dist = nx.exp(nx.clip(raw[..., 1:7], -10.0, 5.0))
        return cls(raw, raw[..., 0], dist, raw[..., 7], raw[..., 8:])

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[-1]


class DetectionHead:
    """Per-voxel two-layer MLP producing centerness, box and class outputs."""

    def __init__(self, channels: int, num_classes: int, hidden: int = 32, prefix: str = "head"):
        self.C = channels
        self.num_classes = num_classes
        self.hidden = hidden
        self.prefix = prefix

    def init_params(self, store: ParameterStore) -> None:
        p, C, Hd, out = self.prefix, self.C, self.hidden, 8 + self.num_classes
        store.get(f"{p}.l1.w", (Hd, C))
        store.get(f"{p}.l1.b", (Hd,), fan_in=C)
        store.get(f"{p}.l2.w", (out, Hd))
        store.get(f"{p}.l2.b", (out,), fan_in=Hd)

    def __call__(self, features, store: ParameterStore) -> HeadOutput:
        self.init_params(store)
        p = self.prefix
        hidden = nx.relu(nx.linear(features, store[f"{p}.l1.w"], store[f"{p}.l1.b"]))
        return HeadOutput.from_raw(nx.linear(hidden, store[f"{p}.l2.w"], store[f"{p}.l2.b"]))


def head_forward(volume, store: ParameterStore, num_classes: int, hidden: int = 32) -> HeadOutput:
    feats = volume.features if hasattr(volume, "features") else volume
    feats = nx.as_tensor(feats)
    return DetectionHead(feats.shape[-1], num_classes, hidden)(feats, store)


# -- targets -------------------------------------------------------------------------

@dataclass
class Targets:
    positive: np.ndarray  # (X, Y, Z) bool
    centerness: np.ndarray  # (X, Y, Z)
    box: np.ndarray  # (X, Y, Z, 7): six face distances + yaw
    class_id: np.ndarray  # (X, Y, Z) int, -1 for negatives
    box_index: np.ndarray  # (X, Y, Z) int, -1 for negatives


def centerness_from_distances(dist: np.ndarray) -> np.ndarray:
    lo = np.minimum(dist[..., :3], dist[..., 3:])
    hi = np.maximum(dist[..., :3], dist[..., 3:])
    ratio = np.prod(np.where(hi > 0, lo / np.where(hi > 0, hi, 1.0), 0.0), axis=-1)
    return np.cbrt(ratio)


def assign_targets(grid: VoxelGridSpec, boxes) -> Targets:
    """Positive voxels are those whose center lies in a box; the smallest box wins."""
    centers = grid.centers()
    shape = grid.dims
    best_vol = np.full(shape, np.inf)
    box_index = np.full(shape, -1, dtype=np.int64)
    dist = np.zeros(shape + (6,))
    for i, box in enumerate(boxes):
        local = _local_offsets(centers, box)
        half = np.asarray(box.size) / 2
        inside = np.all(np.abs(local) <= half, axis=-1)
        take = inside & (box.volume < best_vol)
        best_vol = np.where(take, box.volume, best_vol)
        box_index = np.where(take, i, box_index)
        d = np.concatenate([half + local, half - local], axis=-1)
        dist = np.where(take[..., None], d, dist)
    positive = box_index >= 0
    yaw = np.zeros(shape)
    class_id = np.full(shape, -1, dtype=np.int64)
    for i, box in enumerate(boxes):
        sel = box_index == i
        yaw[sel] = box.yaw
        class_id[sel] = box.class_id
    cness = np.where(positive, centerness_from_distances(dist), 0.0)
    return Targets(positive, cness, np.concatenate([dist, yaw[..., None]], axis=-1), class_id, box_index)


# -- losses ------------------------------------------------------------------------------

def softplus(x) -> Tensor:
    x = nx.as_tensor(x)
    return nx.add(nx.relu(x), nx.log1p(nx.exp(-nx.absolute(x))))


def bce_with_logits(logits, target: np.ndarray) -> Tensor:
    """Elementwise binary cross entropy on logits (numerically stable)."""
    logits = nx.as_tensor(logits)
    return nx.sub(softplus(logits), nx.mul(logits, np.asarray(target, dtype=logits.dtype)))


def focal_loss(logits, onehot: np.ndarray, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA) -> Tensor:
    """Summed sigmoid focal loss over every element of ``logits``."""
    logits = nx.as_tensor(logits)
    y = np.asarray(onehot, dtype=logits.dtype)
    p = nx.sigmoid(logits)
    log_p = -softplus(-logits)
    log_not_p = -softplus(logits)
    pos = nx.mul(log_p, alpha * y)
    neg = nx.mul(log_not_p, (1.0 - alpha) * (1.0 - y))
    if gamma != 0:
        pos = nx.mul(pos, nx.power(nx.sub(1.0, p), gamma))
        neg = nx.mul(neg, nx.power(p, gamma))
    return -nx.tsum(nx.add(pos, neg))


def iou_from_distances(pred, target) -> Tensor:
    """IoU of two boxes sharing an anchor point, given six face distances each."""
    pred = nx.as_tensor(pred)
    target = nx.as_tensor(target)
    inter_ax = nx.add(nx.minimum(pred[..., :3], target[..., :3]), nx.minimum(pred[..., 3:], target[..., 3:]))
    pred_ax = nx.add(pred[..., :3], pred[..., 3:])
    tgt_ax = nx.add(target[..., :3], target[..., 3:])

    def vol(t):
        return nx.mul(nx.mul(t[..., 0], t[..., 1]), t[..., 2])

    inter = vol(inter_ax)
    union = nx.sub(nx.add(vol(pred_ax), vol(tgt_ax)), inter)
    return nx.div(inter, union)


@dataclass
class DetectionLoss:
    total: Tensor
    center: Tensor
    iou: Tensor
    cls: Tensor

    def components(self) -> dict:
        return {"center": self.center.item(), "iou": self.iou.item(), "cls": self.cls.item()}


def detection_loss(pred: HeadOutput, targets: Targets, oriented: bool = False,
                   gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA) -> DetectionLoss:
    """Centerness BCE + (1 - IoU) [+ yaw L1] over positives, focal loss over all voxels."""
    nc = pred.num_classes
    pos = targets.positive.reshape(-1)
    n_pos = int(pos.sum())
    onehot = np.zeros(pos.shape + (nc,))
    pos_idx = np.nonzero(pos)[0]
    onehot[pos_idx, targets.class_id.reshape(-1)[pos_idx]] = 1.0
    logits = nx.reshape(pred.class_logits, (pos.size, nc))
    l_cls = focal_loss(logits, onehot, gamma, alpha) * (1.0 / max(n_pos, 1))
    if n_pos == 0:
        zero = nx.Tensor(0.0)
        return DetectionLoss(l_cls + 0.0, zero, zero, l_cls)
    cness = nx.reshape(pred.centerness, (pos.size,))[pos_idx]
    l_center = nx.mean(bce_with_logits(cness, targets.centerness.reshape(-1)[pos_idx]))
    dist = nx.reshape(pred.distances, (pos.size, 6))[pos_idx]
    tgt = targets.box.reshape(-1, 7)[pos_idx]
    l_iou = nx.mean(nx.sub(1.0, iou_from_distances(dist, tgt[:, :6])))
    if oriented:
        yaw = nx.reshape(pred.yaw, (pos.size,))[pos_idx]
        l_iou = l_iou + nx.mean(nx.absolute(nx.sub(yaw, tgt[:, 6])))
    total = nx.add(nx.add(l_center, l_iou), l_cls)
    return DetectionLoss(total, l_center, l_iou, l_cls)


def total_loss(det, occ, lam: float = 0.5) -> Tensor:
    if lam < 0:
        raise ValueError("occupancy loss weight must be nonnegative")
    return nx.add(det, nx.mul(occ, lam))


# -- decoding ------------------------------------------------------------------------

def decode_boxes(pred: HeadOutput, grid: VoxelGridSpec):
    """Per-voxel boxes and scores as flat arrays in linear voxel order."""
    centers = grid.centers().reshape(-1, 3)
    dist = pred.distances.data.reshape(-1, 6)
    yaw = pred.yaw.data.reshape(-1)
    off = (dist[:, 3:] - dist[:, :3]) / 2
    c, s = np.cos(yaw), np.sin(yaw)
    world = np.stack([c * off[:, 0] - s * off[:, 1], s * off[:, 0] + c * off[:, 1], off[:, 2]], axis=-1)
    cls_prob = nx._sigmoid(pred.class_logits.data.reshape(len(centers), -1))
    score = nx._sigmoid(pred.centerness.data.reshape(-1)) * cls_prob.max(axis=-1)
    return centers + world, dist[:, :3] + dist[:, 3:], yaw, cls_prob.argmax(axis=-1), score


def nms(centers: np.ndarray, sizes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy axis-aligned NMS; ties in score go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    alive = np.ones(len(scores), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        alive[i] = False
        rest = np.nonzero(alive)[0]
        if len(rest):
            ious = iou_one_to_many(centers[i], sizes[i], centers[rest], sizes[rest])
            alive[rest[ious >= iou_thresh]] = False
    return keep


def decode_and_nms(pred: HeadOutput, grid: VoxelGridSpec, score_thresh: float = 0.05,
                   iou_thresh: float = 0.25, max_candidates: int | None = None) -> list[ScoredBox]:
    centers, sizes, yaw, cls, score = decode_boxes(pred, grid)
    cand = np.nonzero(score >= score_thresh)[0]
    if max_candidates is not None and len(cand) > max_candidates:
        order = np.lexsort((cand, -score[cand]))
        cand = np.sort(cand[order[:max_candidates]])
    keep = nms(centers[cand], sizes[cand], score[cand], iou_thresh)
    out = []
    for k in keep:
        i = cand[k]
        box = Box3D(centers[i], sizes[i], wrap_angle(float(yaw[i])), int(cls[i]))
        out.append(ScoredBox(box, float(score[i])))
    return out


# -- evaluation ------------------------------------------------------------------------

@dataclass
class EvalReport:
    per_class: dict = field(default_factory=dict)  # class_id -> {threshold: AP}
    thresholds: tuple = (0.25, 0.5)

    def map_at(self, t: float) -> float:
        if not self.per_class:
            return 0.0
        return float(np.mean([aps[t] for aps in self.per_class.values()]))

    @property
    def map_25(self) -> float:
        return self.map_at(0.25)

    @property
    def map_50(self) -> float:
        return self.map_at(0.5)

    def to_dict(self) -> dict:
        return {
            "per_class": {str(c): {f"{t:.2f}": self.per_class[c][t] for t in self.thresholds}
                          for c in sorted(self.per_class)},
            "mAP": {f"{t:.2f}": self.map_at(t) for t in self.thresholds},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id"] + [f"AP@{t:.2f}" for t in self.thresholds])
        for c in sorted(self.per_class):
            w.writerow([c] + [f"{self.per_class[c][t]:.6f}" for t in self.thresholds])
        w.writerow(["mAP"] + [f"{self.map_at(t):.6f}" for t in self.thresholds])
        return buf.getvalue()


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a score-sorted true-positive flag list."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _pred_key(scene: int, sb: ScoredBox):
    b = sb.box
    return (-sb.score, scene, b.center, b.size, b.yaw)


def evaluate_map(predictions, ground_truth, thresholds=(0.25, 0.5)) -> EvalReport:
    """mAP over scenes. Both arguments are per-scene lists (of ScoredBox / Box3D)."""
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth cover different scene counts")
    classes = sorted({b.class_id for scene in ground_truth for b in scene})
    report = EvalReport(thresholds=tuple(thresholds))
    for c in classes:
        gts = [[b for b in scene if b.class_id == c] for scene in ground_truth]
        n_gt = sum(len(g) for g in gts)
        preds = sorted(((s, sb) for s, scene in enumerate(predictions) for sb in scene if sb.box.class_id == c),
                       key=lambda item: _pred_key(*item))
        report.per_class[c] = {}
        for t in thresholds:
            matched = [np.zeros(len(g), dtype=bool) for g in gts]
            tp = []
            for s, sb in preds:
                if not gts[s]:
                    tp.append(0)
                    continue
                ious = np.array([iou3d_axis_aligned(sb.box, g) for g in gts[s]])
                j = int(np.argmax(ious))
                if ious[j] >= t and not matched[s][j]:
                    matched[s][j] = True
                    tp.append(1)
                else:
                    tp.append(0)
            report.per_class[c][t] = average_precision(np.array(tp), n_gt)
    return report

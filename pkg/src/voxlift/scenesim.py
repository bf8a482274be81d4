"""Synthetic indoor scenes: box placement, camera rigs, analytic rendering, storage."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detection import Box3D
from .geometry import CameraView, Extrinsics, Intrinsics, project_points

FORMAT_VERSION = 1
MAGIC = b"SGCD"


# -- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    room_min: tuple = (-2.0, -2.0, 0.0)
    room_max: tuple = (2.0, 2.0, 1.6)
    box_count: tuple = (1, 3)  # inclusive range
    num_classes: int = 3
    # per-class nominal sizes (m); each drawn size jitters around its template
    class_sizes: tuple = ((0.8, 0.8, 0.8), (1.2, 0.6, 0.6), (0.5, 0.5, 1.2))
    size_jitter: float = 0.1
    max_yaw: float = 0.0
    max_overlap: float = 0.0  # max IoU of the boxes' footprints
    margin: float = 0.1
    num_cameras: int = 4
    orbit_radius: float = 3.0
    camera_height: float = 1.5
    look_height: float = 0.4
    angle_jitter: float = 0.15
    image_size: tuple = (48, 64)
    feature_size: tuple = (12, 16)
    fov_deg: float = 90.0
    channels: int = 16
    far_plane: float = 5.0

    def __post_init__(self):
        for name in ("room_min", "room_max", "box_count", "class_sizes", "image_size", "feature_size"):
            value = getattr(self, name)
            if name == "class_sizes":
                value = tuple(tuple(float(x) for x in s) for s in value)
            else:
                value = tuple(value)
            object.__setattr__(self, name, value)
        if len(self.class_sizes) < self.num_classes:
            raise ValueError("need a size template for every class")
        if self.channels < self.num_classes + 2:
            raise ValueError("channels must be at least num_classes + 2")
        lo, hi = self.box_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad box count range {self.box_count}")
        if self.num_cameras < 1:
            raise ValueError("need at least one camera")

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generation config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class SyntheticScene:
    room_min: tuple
    room_max: tuple
    boxes: list
    views: list
    seed: int
    num_classes: int = 3

    def translated(self, offset) -> "SyntheticScene":
        o = np.asarray(offset, dtype=np.float64)
        return SyntheticScene(tuple(np.asarray(self.room_min) + o), tuple(np.asarray(self.room_max) + o),
                              [b.translated(o) for b in self.boxes], [v.translated(o) for v in self.views],
                              self.seed, self.num_classes)


@dataclass
class RenderedView:
    features: np.ndarray  # (h, w, C) float32
    gt_depth: np.ndarray  # (h, w) float32
    view: CameraView


class GenerationError(RuntimeError):
    pass


# -- generation -------------------------------------------------------------------------

def _camera_rig(cfg: GenConfig, rng: np.random.Generator) -> list[CameraView]:
    center = (np.asarray(cfg.room_min) + np.asarray(cfg.room_max)) / 2
    H, W = cfg.image_size
    f = (W / 2) / math.tan(math.radians(cfg.fov_deg) / 2)
    K = Intrinsics(f, f, (W - 1) / 2, (H - 1) / 2)
    phase = rng.uniform(0, 2 * math.pi)
    views = []
    for i in range(cfg.num_cameras):
        ang = phase + 2 * math.pi * i / cfg.num_cameras + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter)
        eye = np.array([center[0] + cfg.orbit_radius * math.cos(ang),
                        center[1] + cfg.orbit_radius * math.sin(ang), cfg.camera_height])
        target = np.array([center[0], center[1], cfg.look_height])
        views.append(CameraView(K, Extrinsics.look_at(eye, target), cfg.image_size, cfg.feature_size))
    return views


def _footprint_iou(a: Box3D, b: Box3D) -> float:
    # bounding squares of the rotated footprints; conservative for yawed boxes
    def extent(box):
        c, s = abs(math.cos(box.yaw)), abs(math.sin(box.yaw))
        return np.array([c * box.size[0] + s * box.size[1], s * box.size[0] + c * box.size[1]]) / 2

    ea, eb = extent(a), extent(b)
    lo = np.maximum(np.asarray(a.center[:2]) - ea, np.asarray(b.center[:2]) - eb)
    hi = np.minimum(np.asarray(a.center[:2]) + ea, np.asarray(b.center[:2]) + eb)
    inter = float(np.prod(np.clip(hi - lo, 0, None)))
    union = 4 * ea[0] * ea[1] + 4 * eb[0] * eb[1] - inter
    return inter / union


def _box_corners(box: Box3D) -> np.ndarray:
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    local = signs * np.asarray(box.size) / 2
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ R.T + np.asarray(box.center)


def generate_scene(seed: int, cfg: GenConfig) -> SyntheticScene:
    """Seeded scene with boxes resting on the floor and an orbiting camera rig."""
    rng = np.random.default_rng(seed)
    views = _camera_rig(cfg, rng)
    n_boxes = int(rng.integers(cfg.box_count[0], cfg.box_count[1] + 1))
    lo = np.asarray(cfg.room_min) + cfg.margin
    hi = np.asarray(cfg.room_max) - cfg.margin
    boxes: list[Box3D] = []
    for b in range(n_boxes):
        for attempt in range(1000):
            cls = int(rng.integers(cfg.num_classes))
            size = np.asarray(cfg.class_sizes[cls]) * (1 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, 3))
            yaw = float(rng.uniform(-cfg.max_yaw, cfg.max_yaw)) if cfg.max_yaw > 0 else 0.0
            xy = rng.uniform(lo[:2], hi[:2])
            center = np.array([xy[0], xy[1], cfg.room_min[2] + size[2] / 2])
            box = Box3D(center, size, yaw, cls)
            if _box_ok(box, boxes, views, cfg, lo, hi):
                boxes.append(box)
                break
        else:
            raise GenerationError(f"seed {seed}: could not place box {b} after 1000 attempts "
                                  f"(room {cfg.room_min}..{cfg.room_max}, {len(boxes)} placed)")
    return SyntheticScene(cfg.room_min, cfg.room_max, boxes, views, int(seed), cfg.num_classes)


def _box_ok(box, placed, views, cfg, lo, hi) -> bool:
    corners = _box_corners(box)
    if np.any(corners[:, :2] < lo[:2]) or np.any(corners[:, :2] > hi[:2]) or corners[:, 2].max() > cfg.room_max[2]:
        return False
    if any(_footprint_iou(box, other) > cfg.max_overlap for other in placed):
        return False
    return _center_visible(box, placed + [box], views, cfg)


def _center_visible(box, boxes, views, cfg) -> bool:
    for view in views:
        uvd, valid = project_points(np.asarray(box.center)[None], view)
        h, w = view.feature_size
        u, v, d = uvd[0]
        if not valid[0] or not (0 <= u <= w - 1 and 0 <= v <= h - 1):
            continue
        origin = view.extrinsics.center
        direction = np.asarray(box.center) - origin
        dist = np.linalg.norm(direction)
        direction = direction / dist
        # visible when no other box is hit before reaching the center
        blocked = False
        for other in boxes:
            if other is box:
                continue
            t = ray_box_entry(origin, direction, other)
            if t is not None and t < dist:
                blocked = True
                break
        if not blocked:
            return True
    return False


def validate_scene(scene: SyntheticScene, cfg: GenConfig) -> list[str]:
    """Invariant violations (empty list when the scene is valid)."""
    problems = []
    lo, hi = np.asarray(scene.room_min), np.asarray(scene.room_max)
    for i, box in enumerate(scene.boxes):
        corners = _box_corners(box)
        if np.any(corners < lo - 1e-9) or np.any(corners > hi + 1e-9):
            problems.append(f"box {i} leaves the room")
        for j in range(i):
            if _footprint_iou(box, scene.boxes[j]) > cfg.max_overlap:
                problems.append(f"boxes {j} and {i} overlap")
        if not _center_visible(box, scene.boxes, scene.views, cfg):
            problems.append(f"box {i} center not visible")
    return problems


# -- rendering ------------------------------------------------------------------------------

def _to_local(points: np.ndarray, box: Box3D) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = points - np.asarray(box.center)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], axis=-1)


def _dirs_to_local(dirs: np.ndarray, box: Box3D) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    return np.stack([c * dirs[..., 0] + s * dirs[..., 1], -s * dirs[..., 0] + c * dirs[..., 1], dirs[..., 2]],
                    axis=-1)


def slab_intersect(origins: np.ndarray, dirs: np.ndarray, box: Box3D):
    """Vectorized slab test in the box frame.

    Returns ``(t_hit, axis, sign)`` per ray; ``t_hit`` is inf on a miss. The
    entry face is given by its axis and the sign of its outward normal.
    """
    o = _to_local(origins, box)
    d = _dirs_to_local(dirs, box)
    half = np.asarray(box.size) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    # rays parallel to a slab: inside the slab spans everything, outside spans nothing
    par = d == 0
    inside = np.abs(o) <= half
    tmin_ax = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax_ax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = tmin_ax.max(axis=-1)
    t_far = tmax_ax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    axis = tmin_ax.argmax(axis=-1)
    d_ax = np.take_along_axis(d, axis[..., None], -1)[..., 0]
    sign = np.where(d_ax > 0, -1.0, 1.0)
    return np.where(hit, t_near, np.inf), axis, sign


def ray_box_entry(origin, direction, box: Box3D):
    t, _, _ = slab_intersect(np.asarray(origin)[None], np.asarray(direction)[None], box)
    return None if not np.isfinite(t[0]) else float(t[0])


def pixel_rays(view: CameraView):
    """World-space origins and unit-z camera directions for feature-map pixels.

    Directions are scaled so the camera-space z component is 1, which makes
    the ray parameter equal to camera depth.
    """
    h, w = view.feature_size
    K = view.feature_intrinsics
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    R = view.extrinsics.R
    dirs = cam @ R  # R^T applied to each row
    origins = np.broadcast_to(view.extrinsics.center, dirs.shape)
    return origins, dirs


def trace_depth(scene: SyntheticScene, view: CameraView, far: float):
    """Nearest box hit per pixel: (depth, box index or -1, face axis, face sign)."""
    origins, dirs = pixel_rays(view)
    shape = dirs.shape[:-1]
    depth = np.full(shape, np.inf)
    hit_box = np.full(shape, -1, dtype=np.int64)
    face_axis = np.zeros(shape, dtype=np.int64)
    face_sign = np.zeros(shape)
    for i, box in enumerate(scene.boxes):
        t, axis, sign = slab_intersect(origins, dirs, box)
        closer = t < depth
        depth = np.where(closer, t, depth)
        hit_box = np.where(closer, i, hit_box)
        face_axis = np.where(closer, axis, face_axis)
        face_sign = np.where(closer, sign, face_sign)
    miss = ~np.isfinite(depth)
    depth = np.where(miss, far, depth)
    hit_box = np.where(miss, -1, hit_box)
    return depth, hit_box, face_axis, face_sign


def render_view(scene: SyntheticScene, view: CameraView, C: int, far: float = 5.0) -> RenderedView:
    """Ground-truth depth and an analytic feature image for one camera.

    Hit pixels carry the class one-hot scaled by Lambertian shading and the
    hit point's (x, y) normalized to the room; background pixels get zeros in
    the class channels, -1 in the coordinate channels and 1 elsewhere.
    """
    nc = scene.num_classes
    if C < nc + 2:
        raise ValueError("channels must be at least num_classes + 2")
    depth, hit_box, face_axis, face_sign = trace_depth(scene, view, far)
    origins, dirs = pixel_rays(view)
    h, w = depth.shape
    feats = np.zeros((h, w, C))
    feats[..., nc:nc + 2] = -1.0
    feats[..., nc + 2:] = 1.0
    hit = hit_box >= 0
    if hit.any():
        points = origins + dirs * depth[..., None]
        room_lo = np.asarray(scene.room_min)[:2]
        room_span = np.asarray(scene.room_max)[:2] - room_lo
        unit = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        for i, box in enumerate(scene.boxes):
            m = hit_box == i
            if not m.any():
                continue
            normal_local = np.zeros((int(m.sum()), 3))
            normal_local[np.arange(len(normal_local)), face_axis[m]] = face_sign[m]
            c, s = math.cos(box.yaw), math.sin(box.yaw)
            nx_, ny_ = c * normal_local[:, 0] - s * normal_local[:, 1], s * normal_local[:, 0] + c * normal_local[:, 1]
            normal = np.stack([nx_, ny_, normal_local[:, 2]], axis=-1)
            shade = 0.3 + 0.7 * np.abs(np.sum(normal * unit[m], axis=-1))
            block = np.zeros((len(normal), C))
            block[:, box.class_id] = shade
            block[:, nc:nc + 2] = (points[m][:, :2] - room_lo) / room_span
            feats[m] = block
    return RenderedView(feats.astype(np.float32), depth.astype(np.float32), view)


def render_scene(scene: SyntheticScene, C: int, far: float = 5.0) -> list[RenderedView]:
    return [render_view(scene, v, C, far) for v in scene.views]


# -- binary blobs ---------------------------------------------------------------------------

class SceneFormatError(Exception):
    code = 10


class BadMagicError(SceneFormatError):
    code = 11


class VersionMismatchError(SceneFormatError):
    code = 12


class TruncatedBlobError(SceneFormatError):
    code = 13


class ShapeMismatchError(SceneFormatError):
    code = 14


def write_blob(path, array: np.ndarray) -> None:
    """Header (magic, u16 version, u16 rank, u32 extents) then float32 LE data."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<HH", FORMAT_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_blob(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedBlobError(f"{path}: header truncated")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack("<HH", raw[4:8])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    head = 8 + 4 * rank
    if len(raw) < head:
        raise TruncatedBlobError(f"{path}: extents truncated")
    shape = struct.unpack(f"<{rank}I", raw[8:head])
    n = int(np.prod(shape)) if rank else 1
    if len(raw) - head != 4 * n:
        raise TruncatedBlobError(f"{path}: expected {4 * n} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype="<f4", offset=head).reshape(shape).astype(np.float32)


# -- scene persistence ---------------------------------------------------------------------

def _view_to_dict(v: CameraView) -> dict:
    k = v.intrinsics
    return {"intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
            "R": v.extrinsics.R.tolist(), "t": v.extrinsics.t.tolist(),
            "image_size": list(v.image_size), "feature_size": list(v.feature_size)}


def _view_from_dict(d: dict) -> CameraView:
    return CameraView(Intrinsics(**d["intrinsics"]), Extrinsics(np.array(d["R"]), np.array(d["t"])),
                      tuple(d["image_size"]), tuple(d["feature_size"]))


def save_scene(path, scene: SyntheticScene, rendered: list[RenderedView]) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    views = []
    for i, r in enumerate(rendered):
        fname, dname = f"view{i:03d}_features.bin", f"view{i:03d}_depth.bin"
        write_blob(out / fname, r.features)
        write_blob(out / dname, r.gt_depth)
        views.append({"camera": _view_to_dict(r.view), "features": fname, "features_shape": list(r.features.shape),
                      "depth": dname, "depth_shape": list(r.gt_depth.shape)})
    manifest = {"format_version": FORMAT_VERSION, "seed": scene.seed, "num_classes": scene.num_classes,
                "room_min": list(scene.room_min), "room_max": list(scene.room_max),
                "boxes": [b.to_dict() for b in scene.boxes], "views": views}
    (out / "scene.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_scene(path):
    src = Path(path)
    meta = json.loads((src / "scene.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{src}: manifest version {meta.get('format_version')}")
    views, rendered = [], []
    for entry in meta["views"]:
        view = _view_from_dict(entry["camera"])
        feats = read_blob(src / entry["features"])
        depth = read_blob(src / entry["depth"])
        if list(feats.shape) != list(entry["features_shape"]) or list(depth.shape) != list(entry["depth_shape"]):
            raise ShapeMismatchError(f"{src}: blob shapes {feats.shape}/{depth.shape} disagree with manifest")
        views.append(view)
        rendered.append(RenderedView(feats, depth, view))
    scene = SyntheticScene(tuple(meta["room_min"]), tuple(meta["room_max"]),
                           [Box3D.from_dict(b) for b in meta["boxes"]], views, meta["seed"], meta["num_classes"])
    return scene, rendered


# -- datasets --------------------------------------------------------------------------------

class ManifestError(Exception):
    code = 15


@dataclass
class DatasetManifest:
    scenes: list  # relative paths
    split: dict  # path -> "train" | "val"
    config_hash: str
    gen_config: dict = field(default_factory=dict)
    seed: int = 0
    split_ratio: float = 0.8
    root: str = "."

    def paths(self, split: str) -> list[Path]:
        return [Path(self.root) / p for p in self.scenes if self.split[p] == split]

    def to_json(self) -> str:
        return json.dumps({"scenes": self.scenes, "split": self.split, "config_hash": self.config_hash,
                           "gen_config": self.gen_config, "seed": self.seed, "split_ratio": self.split_ratio},
                          indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.json"
        d = json.loads(p.read_text())
        m = cls(d["scenes"], d["split"], d["config_hash"], d["gen_config"], d["seed"], d["split_ratio"],
                str(p.parent))
        expected = dataset_hash(GenConfig.from_dict(m.gen_config), m.seed, len(m.scenes), m.split_ratio)
        if expected != m.config_hash:
            raise ManifestError(f"{p}: config hash {m.config_hash[:12]} does not match its config")
        for rel in m.scenes:
            if not (p.parent / rel / "scene.json").exists():
                raise FileNotFoundError(f"manifest lists missing scene {p.parent / rel}")
        return m


def dataset_hash(cfg: GenConfig, seed: int, count: int, split_ratio: float) -> str:
    blob = json.dumps({"gen": cfg.to_dict(), "seed": seed, "count": count, "split_ratio": split_ratio},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def split_counts(count: int, split_ratio: float) -> tuple[int, int]:
    n_train = int(math.floor(split_ratio * count + 1e-9))
    return n_train, count - n_train


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(cfg: GenConfig, out_dir, count: int, split_ratio: float = 0.8, seed: int = 0) -> DatasetManifest:
    if count < 1:
        raise ValueError("count must be positive")
    if not 0 <= split_ratio <= 1:
        raise ValueError("split ratio must lie in [0, 1]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train, _ = split_counts(count, split_ratio)
    scenes, split = [], {}
    for i in range(count):
        scene = generate_scene(scene_seed(seed, i), cfg)
        rel = f"scene_{i:04d}"
        save_scene(out / rel, scene, render_scene(scene, cfg.channels, cfg.far_plane))
        scenes.append(rel)
        split[rel] = "train" if i < n_train else "val"
    manifest = DatasetManifest(scenes, split, dataset_hash(cfg, seed, count, split_ratio), cfg.to_dict(),
                               int(seed), float(split_ratio), str(out))
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest

"""Procedural multi-view RGB-D room scenes with exact annotations.

Rooms are axis-aligned boxes on the z=0 plane, ceiling-less so rays leaving
through the top record no hit (depth 0). Objects are axis-aligned colored
boxes standing on the floor; everything downstream (rendering, BEV targets,
QA answers, grounding targets) is recomputable from the SceneSpec alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import BevConfig, CameraExtrinsics, CameraIntrinsics

COLOR_PALETTE: Dict[str, Tuple[float, float, float]] = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.65, 0.2),
    "blue": (0.2, 0.3, 0.85),
    "yellow": (0.9, 0.85, 0.2),
    "purple": (0.6, 0.2, 0.7),
    "white": (0.95, 0.95, 0.95),
}

CLASS_VOCAB: Tuple[str, ...] = ("chair", "table", "sofa", "lamp", "box", "plant")

# class-conditional extents (meters): ((x_lo, x_hi), (y_lo, y_hi), (h_lo, h_hi));
# distinctive silhouettes make class identity recoverable from geometry
CLASS_SIZES: Dict[str, Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]] = {
    "chair": ((0.40, 0.55), (0.40, 0.55), (0.80, 1.00)),
    "table": ((0.90, 1.30), (0.90, 1.30), (0.62, 0.75)),
    "sofa": ((1.40, 1.80), (0.65, 0.90), (0.70, 0.85)),
    "lamp": ((0.15, 0.25), (0.15, 0.25), (1.40, 1.70)),
    "box": ((0.50, 0.70), (0.50, 0.70), (0.50, 0.70)),
    "plant": ((0.28, 0.45), (0.28, 0.45), (0.30, 0.50)),
}

FLOOR_COLOR = (0.72, 0.70, 0.66)
WALL_COLORS = {
    "x_lo": (0.58, 0.52, 0.52),
    "x_hi": (0.52, 0.58, 0.52),
    "y_lo": (0.52, 0.52, 0.58),
    "y_hi": (0.56, 0.56, 0.48),
}

# hit-id codes for non-object surfaces
HIT_NONE = -1
HIT_FLOOR = -2
HIT_WALL_X_LO = -3
HIT_WALL_X_HI = -4
HIT_WALL_Y_LO = -5
HIT_WALL_Y_HI = -6


@dataclass
class ObjectSpec:
    id: int
    cls: str
    color: str
    box_min: np.ndarray  # (3,) meters
    box_max: np.ndarray  # (3,) meters

    def __post_init__(self):
        self.box_min = np.asarray(self.box_min, dtype=np.float64)
        self.box_max = np.asarray(self.box_max, dtype=np.float64)
        if not (self.box_max > self.box_min).all():
            raise ValueError(f"degenerate box for object {self.id}")

    @property
    def rgb(self) -> Tuple[float, float, float]:
        return COLOR_PALETTE[self.color]

    @property
    def center(self) -> np.ndarray:
        return (self.box_min + self.box_max) / 2.0


@dataclass
class SceneSpec:
    room_size: np.ndarray  # (3,): room spans [0, lx] x [0, ly] x [0, lz]
    objects: List[ObjectSpec]
    seed: int

    def __post_init__(self):
        self.room_size = np.asarray(self.room_size, dtype=np.float64)
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("object ids not unique")
        for o in self.objects:
            if (o.box_min < -1e-9).any() or (o.box_max > self.room_size + 1e-9).any():
                raise ValueError(f"object {o.id} outside room")

    def object_by_id(self, oid: int) -> ObjectSpec:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)


@dataclass
class PosedFrame:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32 meters, 0 where no hit
    K: CameraIntrinsics
    T: CameraExtrinsics
    index: int


@dataclass
class SceneAnnotations:
    qa: List[Tuple[str, str]]
    captions: List[Tuple[int, str]]
    grounding: List[Tuple[str, frozenset]]


@dataclass
class SceneGenConfig:
    object_count: Tuple[int, int] = (3, 6)
    room_xy: Tuple[float, float] = (3.8, 5.5)
    room_height: float = 2.6
    size_scale: float = 1.0  # multiplies the class-conditional extents
    margin: float = 0.15  # clearance between objects and to walls
    max_tries: int = 200

    def __post_init__(self):
        if self.object_count[0] < 1 or self.object_count[1] < self.object_count[0]:
            raise ValueError(f"invalid object count range {self.object_count}")
        if self.room_xy[1] < self.room_xy[0] or self.room_xy[0] <= 0:
            raise ValueError(f"invalid room size range {self.room_xy}")


def boxes_overlap(amin, amax, bmin, bmax, gap: float = 0.0) -> bool:
    """Axis-aligned 3D overlap test with an optional clearance gap."""
    return bool((np.asarray(amin) < np.asarray(bmax) + gap).all() and (np.asarray(bmin) < np.asarray(amax) + gap).all())


def generate_scene(seed: int, cfg: SceneGenConfig | None = None) -> SceneSpec:
    """Deterministic rejection-sampled room; raises if placement fails."""
    cfg = cfg or SceneGenConfig()
    rng = np.random.default_rng(seed)
    lx = rng.uniform(*cfg.room_xy)
    ly = rng.uniform(*cfg.room_xy)
    room = np.array([lx, ly, cfg.room_height])
    n = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))

    objects: List[ObjectSpec] = []
    for oid in range(n):
        placed = False
        for _ in range(cfg.max_tries):
            # class resampled per try so a large class can yield to a small
            # one in crowded rooms
            cls = CLASS_VOCAB[rng.integers(len(CLASS_VOCAB))]
            color = list(COLOR_PALETTE)[rng.integers(len(COLOR_PALETTE))]
            (x_rng, y_rng, h_rng) = CLASS_SIZES[cls]
            sx = rng.uniform(*x_rng) * cfg.size_scale
            sy = rng.uniform(*y_rng) * cfg.size_scale
            h = rng.uniform(*h_rng) * cfg.size_scale
            x0 = rng.uniform(cfg.margin, lx - sx - cfg.margin)
            y0 = rng.uniform(cfg.margin, ly - sy - cfg.margin)
            bmin = np.array([x0, y0, 0.0])
            bmax = np.array([x0 + sx, y0 + sy, h])
            if any(boxes_overlap(bmin, bmax, o.box_min, o.box_max, gap=cfg.margin) for o in objects):
                continue
            objects.append(ObjectSpec(id=oid, cls=cls, color=color, box_min=bmin, box_max=bmax))
            placed = True
            break
        if not placed:
            raise RuntimeError(f"object placement failed for seed {seed} after {cfg.max_tries} tries")
    return SceneSpec(room_size=room, objects=objects, seed=seed)


def default_intrinsics(resolution: int = 64, fov_deg: float = 70.0) -> CameraIntrinsics:
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2.0)
    return CameraIntrinsics(fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0, width=resolution, height=resolution)


def look_at(eye: np.ndarray, target: np.ndarray) -> CameraExtrinsics:
    """Camera-to-world pose looking from eye toward target, world-up +z."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("camera looking straight along the vertical axis")
    right = right / nr
    down = np.cross(forward, right)
    rot = np.column_stack([right, down, forward])
    return CameraExtrinsics(rotation=rot, translation=eye)


def sample_trajectory(scene: SceneSpec, num_views: int) -> List[CameraExtrinsics]:
    """Deterministic orbit inside the room, pitched toward the interior.

    Consecutive cameras sit close on the orbit so adjacent frusta overlap,
    keeping cross-view reconstruction well-posed.
    """
    if num_views < 1:
        raise ValueError("num_views must be >= 1")
    rng = np.random.default_rng(scene.seed + 1_000_003)
    lx, ly, lz = scene.room_size
    center = np.array([lx / 2.0, ly / 2.0, 0.0])
    radius = 0.36 * min(lx, ly)
    height = 0.62 * lz
    target = np.array([lx / 2.0, ly / 2.0, 0.30 * lz])
    phase = rng.uniform(0.0, 2.0 * np.pi)
    poses = []
    for k in range(num_views):
        theta = phase + 2.0 * np.pi * k / num_views
        eye = center + np.array([radius * np.cos(theta), radius * np.sin(theta), height])
        poses.append(look_at(eye, target))
    return poses


def _trace(scene: SceneSpec, K: CameraIntrinsics, T: CameraExtrinsics):
    """Nearest-hit ray cast against room surfaces and object boxes.

    Rays go through pixel centers with camera-frame direction (a, b, 1), so
    the hit parameter equals the z-depth used by unprojection.
    Returns (rgb float32, depth float32, hit ids int32).
    """
    h, w = K.height, K.width
    ii, jj = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    dirs_cam = np.stack(
        [(jj - K.cx) / K.fx, (ii - K.cy) / K.fy, np.ones_like(ii)], axis=-1
    ).reshape(-1, 3)
    dirs = dirs_cam @ T.rotation.T
    origin = T.translation

    n_rays = dirs.shape[0]
    best_t = np.full(n_rays, np.inf)
    hit_id = np.full(n_rays, HIT_NONE, dtype=np.int32)

    # room interior: exit distance per axis, surface = nearest exit plane
    lx, ly, lz = scene.room_size
    lo = np.zeros(3)
    hi = np.array([lx, ly, lz])
    room_t = np.full(n_rays, np.inf)
    room_code = np.full(n_rays, HIT_NONE, dtype=np.int32)
    codes = {
        (0, 0): HIT_WALL_X_LO,
        (0, 1): HIT_WALL_X_HI,
        (1, 0): HIT_WALL_Y_LO,
        (1, 1): HIT_WALL_Y_HI,
        (2, 0): HIT_FLOOR,
        (2, 1): HIT_NONE,  # ceiling-less: exiting through the top is no hit
    }
    for axis in range(3):
        d = dirs[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_pos = np.where(d > 1e-12, (hi[axis] - origin[axis]) / d, np.inf)
            t_neg = np.where(d < -1e-12, (lo[axis] - origin[axis]) / d, np.inf)
        for t_axis, side in ((t_pos, 1), (t_neg, 0)):
            closer = t_axis < room_t
            room_t[closer] = t_axis[closer]
            room_code[closer] = codes[(axis, side)]
    solid = room_code != HIT_NONE
    best_t[solid] = room_t[solid]
    hit_id[solid] = room_code[solid]

    # object boxes: slab-method entry distance
    for obj in scene.objects:
        t_near = np.full(n_rays, -np.inf)
        t_far = np.full(n_rays, np.inf)
        ok = np.ones(n_rays, dtype=bool)
        for axis in range(3):
            d = dirs[:, axis]
            o = origin[axis]
            parallel = np.abs(d) < 1e-12
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (obj.box_min[axis] - o) / d
                t2 = (obj.box_max[axis] - o) / d
            t_lo = np.minimum(t1, t2)
            t_hi = np.maximum(t1, t2)
            t_near = np.where(parallel, t_near, np.maximum(t_near, t_lo))
            t_far = np.where(parallel, t_far, np.minimum(t_far, t_hi))
            ok &= ~parallel | ((obj.box_min[axis] <= o) & (o <= obj.box_max[axis]))
        hit = ok & (t_near <= t_far) & (t_near > 1e-9) & (t_near < best_t)
        best_t[hit] = t_near[hit]
        hit_id[hit] = obj.id

    depth = np.where(np.isfinite(best_t) & (hit_id != HIT_NONE), best_t, 0.0)
    rgb = np.zeros((n_rays, 3), dtype=np.float32)
    surface_colors = {
        HIT_FLOOR: FLOOR_COLOR,
        HIT_WALL_X_LO: WALL_COLORS["x_lo"],
        HIT_WALL_X_HI: WALL_COLORS["x_hi"],
        HIT_WALL_Y_LO: WALL_COLORS["y_lo"],
        HIT_WALL_Y_HI: WALL_COLORS["y_hi"],
    }
    for code, color in surface_colors.items():
        rgb[hit_id == code] = color
    for obj in scene.objects:
        rgb[hit_id == obj.id] = obj.rgb
    return (
        rgb.reshape(h, w, 3),
        depth.reshape(h, w).astype(np.float32),
        hit_id.reshape(h, w),
    )


def render_frame(scene: SceneSpec, K: CameraIntrinsics, T: CameraExtrinsics, index: int = 0) -> PosedFrame:
    rgb, depth, _ = _trace(scene, K, T)
    return PosedFrame(rgb=rgb, depth=depth, K=K, T=T, index=index)


def render_hit_ids(scene: SceneSpec, K: CameraIntrinsics, T: CameraExtrinsics) -> np.ndarray:
    """Per-pixel hit ids (>= 0 for objects); used by visibility oracles."""
    return _trace(scene, K, T)[2]


def scene_bev_config(scene: SceneSpec, resolution: int = 64) -> BevConfig:
    lx, ly, _ = scene.room_size
    return BevConfig(x_range=(0.0, float(lx)), y_range=(0.0, float(ly)), resolution=resolution)


def render_bev_gt(scene: SceneSpec, cfg: BevConfig) -> np.ndarray:
    """Top-down orthographic render of the SceneSpec itself (noise-free target).

    A pixel shows an object's color iff the pixel center lies inside the
    object footprint; otherwise the floor color. Footprints are disjoint
    because objects stand on the floor and never overlap in 3D.
    """
    res = cfg.resolution
    img = np.empty((res, res, 3), dtype=np.float32)
    img[:] = FLOOR_COLOR
    x0, x1 = cfg.x_range
    y0, y1 = cfg.y_range
    xs = x0 + (np.arange(res) + 0.5) / res * (x1 - x0)
    ys = y0 + (np.arange(res) + 0.5) / res * (y1 - y0)
    for obj in sorted(scene.objects, key=lambda o: o.box_max[2]):
        in_x = (xs >= obj.box_min[0]) & (xs < obj.box_max[0])
        in_y = (ys >= obj.box_min[1]) & (ys < obj.box_max[1])
        img[np.ix_(in_y, in_x)] = obj.rgb
    return img


def render_views(scene: SceneSpec, num_views: int = 8, resolution: int = 64) -> List[PosedFrame]:
    K = default_intrinsics(resolution)
    return [render_frame(scene, K, T, index=k) for k, T in enumerate(sample_trajectory(scene, num_views))]


# ---------------------------------------------------------------------------
# annotations


def count_by_color(scene: SceneSpec, color: str) -> int:
    return sum(1 for o in scene.objects if o.color == color)


def count_by_class(scene: SceneSpec, cls: str) -> int:
    return sum(1 for o in scene.objects if o.cls == cls)


def make_annotations(scene: SceneSpec, rng: np.random.Generator) -> SceneAnnotations:
    """Templated QA, per-object captions, and referring expressions.

    The QA mix is balanced for visual headroom: color-of-unique-class
    (chance 1/#colors), existence with present/absent classes paired
    (chance 1/2), one count over a present color, and a total count.
    Referring expressions cover zero-target (absent class), single-target
    (unique color+class) and multi-target (shared class) regimes.
    """
    if not scene.objects:
        raise ValueError("scene has no objects")
    qa: List[Tuple[str, str]] = []
    colors_present = sorted({o.color for o in scene.objects})
    classes_present = sorted({o.cls for o in scene.objects})
    classes_absent = [c for c in CLASS_VOCAB if c not in classes_present]

    unique_classes = [c for c in classes_present if count_by_class(scene, c) == 1]
    for cls in rng.permutation(unique_classes)[:2]:
        obj = next(o for o in scene.objects if o.cls == cls)
        qa.append((f"what color is the {cls}?", obj.color))
    present = list(rng.permutation(classes_present)[:2])
    absent = list(rng.permutation(classes_absent)[:2])
    for cls in present + absent:
        qa.append((f"is there a {cls} in the room?", "yes" if count_by_class(scene, cls) else "no"))
    for color in rng.permutation(colors_present)[:2]:
        qa.append((f"how many {color} objects are in the room?", str(count_by_color(scene, color))))
    qa.append(("how many objects are in the room?", str(len(scene.objects))))

    captions = [(o.id, f"a {o.color} {o.cls}") for o in scene.objects]

    grounding: List[Tuple[str, frozenset]] = []
    for o in scene.objects:
        matches = frozenset(m.id for m in scene.objects if m.cls == o.cls and m.color == o.color)
        grounding.append((f"the {o.color} {o.cls}", matches))
    for cls in classes_present:
        grounding.append((f"the {cls}", frozenset(o.id for o in scene.objects if o.cls == cls)))
    absent = [c for c in CLASS_VOCAB if c not in classes_present]
    if absent:
        grounding.append((f"the {absent[int(rng.integers(len(absent)))]}", frozenset()))
    # dedupe expressions, keeping first occurrence
    seen = set()
    grounding = [(e, t) for e, t in grounding if not (e in seen or seen.add(e))]
    return SceneAnnotations(qa=qa, captions=captions, grounding=grounding)

"""Synthetic scenes with exact ground truth, anchor-quality metrics and
visibility-stratified reports.

The synthetic sensor rig puts six pinhole cameras and the LiDAR at the
same origin. LiDAR returns are drawn on sensor-facing box faces and on the
ground at a fixed areal density, then kept only if nothing else is hit
first along the ray from the origin. Masks are rendered per pixel by ray
casting, so occlusion is exact in both modalities.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import binary_erosion
from shapely.geometry import Point, Polygon

from .errors import PlacementFailure, SchemaError
from .geometry import CameraCalibration, RegionOfInterest
from .scene_io import CLASS_NAMES, NUM_CLASSES, AnchorSet, GTBox, InstanceMask, Scene

# (w_min, w_max), (h_min, h_max), (l_min, l_max) per class, nuScenes order
CLASS_SIZE_RANGES = (
    ((1.4, 2.8), (1.2, 3.1), (3.4, 6.6)),    # car
    ((1.7, 3.5), (1.7, 4.5), (4.5, 14.0)),   # truck
    ((2.6, 3.5), (2.8, 4.6), (6.9, 13.8)),   # bus
    ((2.2, 2.3), (3.3, 3.9), (1.7, 14.0)),   # trailer
    ((2.1, 3.4), (2.0, 3.0), (3.7, 7.6)),    # construction_vehicle
    ((0.3, 1.0), (1.0, 2.2), (0.3, 1.3)),    # pedestrian
    ((0.4, 1.5), (1.1, 2.0), (1.2, 2.8)),    # motorcycle
    ((0.4, 0.9), (0.9, 2.0), (1.3, 2.0)),    # bicycle
    ((0.2, 1.2), (0.5, 1.4), (1.3, 2.0)),    # traffic_cone
    ((1.7, 3.6), (0.8, 1.4), (0.3, 0.8)),    # barrier
)
CAMERA_YAWS_DEG = (0.0, -60.0, -120.0, 180.0, 120.0, 60.0)
LEVEL_EDGES = (0.4, 0.6, 0.8)
LEVELS = (1, 2, 3, 4)
_HIT_TOL = 1e-6


# --------------------------------------------------------------------------
# scene specification
# --------------------------------------------------------------------------

@dataclass
class SceneSpec:
    class_counts: dict = field(default_factory=lambda: {
        "car": [4, 8], "truck": [0, 2], "bus": [0, 1], "pedestrian": [2, 5],
        "barrier": [0, 3], "traffic_cone": [0, 3], "bicycle": [0, 2], "motorcycle": [0, 1],
    })
    occluder_prob: float = 0.5
    occluder_class: str = "car"
    point_density: float = 20.0     # returns per m^2 of visible object surface
    ground_density: float = 0.5     # returns per m^2 of visible ground
    noise_sigma: float = 0.02       # range noise, metres
    mask_dropout: float = 0.0
    mask_erosion_px: int = 0
    min_mask_pixels: int = 16
    min_range: float = 5.0
    max_range: float = 50.0
    image_width: int = 640
    image_height: int = 360
    hfov_deg: float = 71.0
    ground_z: float = -1.8
    placement_margin: float = 0.3
    max_attempts: int = 200
    seed: int = 0

    def __post_init__(self):
        problems = []
        for name, rng_ in self.class_counts.items():
            if name not in CLASS_NAMES:
                problems.append(f"class_counts: unknown class {name!r}")
            elif not (len(rng_) == 2 and 0 <= rng_[0] <= rng_[1]):
                problems.append(f"class_counts[{name}] must be [min, max] with 0 <= min <= max")
        if self.occluder_class not in CLASS_NAMES:
            problems.append(f"unknown occluder_class {self.occluder_class!r}")
        for name in ("occluder_prob", "mask_dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        for name in ("point_density", "ground_density"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        if self.noise_sigma < 0:
            problems.append("noise_sigma must be >= 0")
        if not 0 < self.min_range < self.max_range:
            problems.append("need 0 < min_range < max_range")
        if problems:
            raise SchemaError("; ".join(problems), problems)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        if not isinstance(d, dict):
            raise SchemaError("scene spec must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise SchemaError(f"scene spec: unknown keys {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SchemaError(f"scene spec: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Box:
    center: np.ndarray  # (3,)
    size: tuple         # (w, l, h)
    yaw: float
    class_id: int

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    @property
    def half(self) -> np.ndarray:
        w, l, h = self.size
        return np.array([l, w, h]) / 2.0

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return (signs * self.half) @ self.rotation.T + self.center

    def footprint(self, margin: float = 0.0) -> Polygon:
        w, l, _ = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = l / 2 + margin, w / 2 + margin
        pts = [(self.center[0] + c * x - s * y, self.center[1] + s * x + c * y)
               for x, y in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))]
        return Polygon(pts)

    def ray_hits(self, origin, dirs) -> np.ndarray:
        """Entry parameter t along ``origin + t * dirs``; inf on a miss."""
        R = self.rotation
        o = (np.asarray(origin, dtype=float) - self.center) @ R
        d = np.asarray(dirs, dtype=float) @ R
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-self.half - o) / d
            t2 = (self.half - o) / d
        t_near = np.nanmax(np.minimum(t1, t2), axis=1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (t_far >= t_near) & (t_near > 0)
        return np.where(hit, t_near, np.inf)

    def to_gt(self, visible_fraction: float) -> GTBox:
        return GTBox(self.center.copy(), self.size, self.yaw, self.class_id,
                     float(min(max(visible_fraction, 0.0), 1.0)))


@dataclass
class SyntheticScene:
    scene: Scene
    boxes: list[Box]
    point_object: np.ndarray  # (n,) owning box index per LiDAR point, -1 for ground
    mask_object: dict         # instance_id -> box index


# --------------------------------------------------------------------------
# rig and placement
# --------------------------------------------------------------------------

def camera_rig(width: int = 640, height: int = 360, hfov_deg: float = 71.0) -> list[CameraCalibration]:
    """Six outward-looking cameras sharing the LiDAR origin, 60 degrees apart."""
    f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    K = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
    cams = []
    for cid, yaw_deg in enumerate(CAMERA_YAWS_DEG):
        y = math.radians(yaw_deg)
        R = np.array([[math.sin(y), -math.cos(y), 0.0],
                      [0.0, 0.0, -1.0],
                      [math.cos(y), math.sin(y), 0.0]])
        E = np.eye(4)
        E[:3, :3] = R
        cams.append(CameraCalibration(K, E, width, height, cid))
    return cams


def _random_box(class_id, xy, yaw, ground_z, rng) -> Box:
    (w0, w1), (h0, h1), (l0, l1) = CLASS_SIZE_RANGES[class_id]
    w, h, l = rng.uniform(w0, w1), rng.uniform(h0, h1), rng.uniform(l0, l1)
    return Box(np.array([xy[0], xy[1], ground_z + h / 2.0]), (w, l, h), yaw, class_id)


def _fits(box: Box, placed: list[Box], spec: SceneSpec, roi: RegionOfInterest) -> bool:
    corners = box.corners()
    if not roi.contains(corners).all():
        return False
    if box.footprint().distance(Point(0.0, 0.0)) < spec.min_range * 0.5:
        return False
    grown = box.footprint(spec.placement_margin)
    return not any(grown.intersects(p.footprint()) for p in placed)


def place_boxes(spec: SceneSpec, rng: np.random.Generator,
                roi: Optional[RegionOfInterest] = None) -> list[Box]:
    """Random non-overlapping boxes plus optional occluders in front of them."""
    roi = roi or RegionOfInterest()
    wanted = []
    for cid, name in enumerate(CLASS_NAMES):
        lo, hi = spec.class_counts.get(name, (0, 0))
        wanted += [cid] * int(rng.integers(lo, hi + 1))
    placed: list[Box] = []
    for cid in wanted:
        for _ in range(spec.max_attempts):
            ang = rng.uniform(-math.pi, math.pi)
            rad = math.sqrt(rng.uniform(spec.min_range ** 2, spec.max_range ** 2))
            box = _random_box(cid, (rad * math.cos(ang), rad * math.sin(ang)),
                              rng.uniform(-math.pi, math.pi), spec.ground_z, rng)
            if _fits(box, placed, spec, roi):
                placed.append(box)
                break
        else:
            raise PlacementFailure(
                f"could not place a {CLASS_NAMES[cid]} after {spec.max_attempts} attempts")

    occ_class = CLASS_NAMES.index(spec.occluder_class)
    for target in list(placed):
        if rng.uniform() >= spec.occluder_prob:
            continue
        rng_t = float(np.hypot(*target.center[:2]))
        along = target.center[:2] / rng_t
        across = np.array([-along[1], along[0]])
        for _ in range(spec.max_attempts // 4):
            dist = rng_t * rng.uniform(0.45, 0.8)
            if dist < spec.min_range:
                break
            xy = along * dist + across * rng.uniform(-1.5, 1.5)
            box = _random_box(occ_class, xy, rng.uniform(-math.pi, math.pi), spec.ground_z, rng)
            if _fits(box, placed, spec, roi):
                placed.append(box)
                break
    return placed


# --------------------------------------------------------------------------
# LiDAR
# --------------------------------------------------------------------------

def _face_samples(box: Box, density: float, rng) -> np.ndarray:
    """Uniform samples on the sensor-facing faces (bottom face excluded)."""
    R, half, c = box.rotation, box.half, box.center
    out = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            if axis == 2 and sign < 0:
                continue
            normal = R[:, axis] * sign
            face_center = c + normal * half[axis]
            if normal @ face_center >= 0:  # faces away from the origin
                continue
            a, b = [k for k in range(3) if k != axis]
            area = 4.0 * half[a] * half[b]
            n = rng.poisson(density * area)
            local = np.zeros((n, 3))
            local[:, axis] = sign * half[axis]
            local[:, a] = rng.uniform(-half[a], half[a], n)
            local[:, b] = rng.uniform(-half[b], half[b], n)
            out.append(local @ R.T + c)
    return np.concatenate(out) if out else np.zeros((0, 3))


def _nearest_box_hit(boxes: Sequence[Box], origin, dirs):
    t_best = np.full(len(dirs), np.inf)
    owner = np.full(len(dirs), -1, dtype=np.int64)
    for k, b in enumerate(boxes):
        t = b.ray_hits(origin, dirs)
        closer = t < t_best
        t_best[closer] = t[closer]
        owner[closer] = k
    return t_best, owner


def cast_lidar(boxes: Sequence[Box], spec: SceneSpec, rng: np.random.Generator,
               roi: Optional[RegionOfInterest] = None):
    """Returns (points (n, 3), owner (n,)) with owner -1 for ground returns."""
    roi = roi or RegionOfInterest()
    samples, owners = [], []
    for k, b in enumerate(boxes):
        s = _face_samples(b, spec.point_density, rng)
        samples.append(s)
        owners.append(np.full(len(s), k))
    area = (roi.x_max - roi.x_min) * (roi.y_max - roi.y_min)
    n_ground = rng.poisson(spec.ground_density * area)
    g = np.column_stack([rng.uniform(roi.x_min, roi.x_max, n_ground),
                         rng.uniform(roi.y_min, roi.y_max, n_ground),
                         np.full(n_ground, spec.ground_z)])
    g = g[np.hypot(g[:, 0], g[:, 1]) >= 2.0]
    samples.append(g)
    owners.append(np.full(len(g), -1))
    pts = np.concatenate(samples)
    own = np.concatenate(owners).astype(np.int64)

    rng_to = np.linalg.norm(pts, axis=1)
    dirs = pts / rng_to[:, None]
    t_hit, _ = _nearest_box_hit(boxes, np.zeros(3), dirs)
    visible = t_hit >= rng_to - _HIT_TOL
    pts, own, rng_to, dirs = pts[visible], own[visible], rng_to[visible], dirs[visible]
    if spec.noise_sigma > 0:
        pts = dirs * (rng_to + rng.normal(0.0, spec.noise_sigma, len(rng_to)))[:, None]
    return pts, own


# --------------------------------------------------------------------------
# masks
# --------------------------------------------------------------------------

def _pixel_window(box: Box, cam: CameraCalibration, near: float = 0.05):
    """Inclusive (u0, v0, u1, v1) pixel window that may contain the box, or None."""
    cam_pts = cam.to_camera(box.corners())
    K = cam.intrinsics
    W, H = cam.image_width, cam.image_height
    # frustum half-spaces through the optical centre
    x, y, z = cam_pts.T
    left = (x - (0 - K[0, 2]) / K[0, 0] * z)
    right = ((W - K[0, 2]) / K[0, 0] * z - x)
    top = (y - (0 - K[1, 2]) / K[1, 1] * z)
    bottom = ((H - K[1, 2]) / K[1, 1] * z - y)
    for plane in (left, right, top, bottom, z - near):
        if np.all(plane < 0):
            return None
    if np.any(z <= near):
        return 0, 0, W - 1, H - 1
    uv = (cam_pts @ K.T)[:, :2] / z[:, None]
    u0 = max(int(math.floor(uv[:, 0].min())) - 1, 0)
    v0 = max(int(math.floor(uv[:, 1].min())) - 1, 0)
    u1 = min(int(math.ceil(uv[:, 0].max())) + 1, W - 1)
    v1 = min(int(math.ceil(uv[:, 1].max())) + 1, H - 1)
    if u0 > u1 or v0 > v1:
        return None
    return u0, v0, u1, v1


def _overlaps(a, b) -> bool:
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


def render_masks(boxes: Sequence[Box], cam: CameraCalibration):
    """Per box: (visible bitmap or None, visible pixel count, unoccluded pixel count)."""
    windows = [_pixel_window(b, cam) for b in boxes]
    out = []
    origin = cam.center
    for k, (box, win) in enumerate(zip(boxes, windows)):
        if win is None:
            out.append((None, 0, 0))
            continue
        u0, v0, u1, v1 = win
        uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
        pix = np.column_stack([uu.ravel(), vv.ravel()])
        dirs = cam.pixel_rays(pix)
        t_self = box.ray_hits(origin, dirs)
        hit = np.isfinite(t_self)
        n_unocc = int(hit.sum())
        if n_unocc == 0:
            out.append((None, 0, 0))
            continue
        pix, dirs, t_self = pix[hit], dirs[hit], t_self[hit]
        blocked = np.zeros(len(pix), dtype=bool)
        for j, (other, w2) in enumerate(zip(boxes, windows)):
            if j == k or w2 is None or not _overlaps(win, w2):
                continue
            blocked |= other.ray_hits(origin, dirs) < t_self
        vis = pix[~blocked]
        if len(vis) == 0:
            out.append((None, 0, n_unocc))
            continue
        bm = np.zeros((cam.image_height, cam.image_width), dtype=bool)
        bm[vis[:, 1], vis[:, 0]] = True
        out.append((bm, len(vis), n_unocc))
    return out


# --------------------------------------------------------------------------
# scene synthesis
# --------------------------------------------------------------------------

def render_scene(boxes: Sequence[Box], spec: SceneSpec, rng: np.random.Generator,
                 scene_id: str = "synthetic", roi: Optional[RegionOfInterest] = None) -> SyntheticScene:
    """Ray-cast LiDAR and render masks for a fixed set of boxes."""
    boxes = list(boxes)
    cams = camera_rig(spec.image_width, spec.image_height, spec.hfov_deg)
    points, owner = cast_lidar(boxes, spec, rng, roi)

    visible = np.zeros(len(boxes))
    unoccluded = np.zeros(len(boxes))
    masks, mask_object = [], {}
    for cam in cams:
        for k, (bm, n_vis, n_unocc) in enumerate(render_masks(boxes, cam)):
            visible[k] += n_vis
            unoccluded[k] += n_unocc
            if bm is None or n_vis < spec.min_mask_pixels:
                continue
            if spec.mask_dropout > 0 and rng.uniform() < spec.mask_dropout:
                continue
            if spec.mask_erosion_px > 0:
                bm = binary_erosion(bm, iterations=spec.mask_erosion_px)
                if not bm.any():
                    continue
            iid = len(masks)
            masks.append(InstanceMask(cam.camera_id, boxes[k].class_id, bm, iid))
            mask_object[iid] = k

    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(unoccluded > 0, visible / np.maximum(unoccluded, 1), 0.0)
    gt = [b.to_gt(f) for b, f in zip(boxes, frac)]
    intensity = np.where(owner >= 0, 0.5, 0.1)
    scene = Scene(scene_id, points, cams, masks, gt, intensity)
    return SyntheticScene(scene, boxes, owner, mask_object)


def synth_scene(spec: SceneSpec, rng, scene_id: str = "synthetic",
                roi: Optional[RegionOfInterest] = None) -> SyntheticScene:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    boxes = place_boxes(spec, rng, roi)
    return render_scene(boxes, spec, rng, scene_id, roi)


def scene_seeds(master_seed: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(int(master_seed)).spawn(count)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def visibility_bin(visible_fraction: float) -> int:
    """Level 1-4 from [0, .4), [.4, .6), [.6, .8), [.8, 1]."""
    if not 0.0 <= visible_fraction <= 1.0:
        raise ValueError(f"visible fraction {visible_fraction} outside [0, 1]")
    return 1 + sum(visible_fraction >= e for e in LEVEL_EDGES)


def coverage(anchors, gt: Sequence[GTBox], radius: float,
             include_background: bool = False) -> tuple[np.ndarray, float]:
    """Per-GT covered flags and the covered rate (0 when there is no GT)."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    if isinstance(anchors, AnchorSet):
        kinds = None if include_background else ("oce", "cluster", "neighbor")
        pos = anchors.positions(kinds)
    else:
        pos = np.asarray(anchors, dtype=float).reshape(-1, 3)
    if not gt:
        return np.zeros(0, dtype=bool), 0.0
    centers = np.array([g.center for g in gt])
    if len(pos) == 0:
        return np.zeros(len(gt), dtype=bool), 0.0
    d2 = ((centers[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    covered = d2.min(axis=1) <= radius * radius
    return covered, float(covered.mean())


@dataclass
class CenterMatch:
    anchor_index: int
    gt_index: int
    class_id: int
    level: int
    error: float          # Euclidean, metres
    radial_error: float   # |gt| - |anchor|; positive means the anchor sits toward the sensor


@dataclass
class CenterErrorResult:
    matches: list[CenterMatch]
    unmatched: int

    def errors(self, class_id=None, level=None) -> np.ndarray:
        return np.array([m.error for m in self.matches
                         if (class_id is None or m.class_id == class_id)
                         and (level is None or m.level == level)])

    def radial_errors(self, class_id=None, level=None) -> np.ndarray:
        return np.array([m.radial_error for m in self.matches
                         if (class_id is None or m.class_id == class_id)
                         and (level is None or m.level == level)])

    def stats(self) -> dict:
        out = {}
        for cid in range(NUM_CLASSES):
            for lvl in LEVELS:
                e = self.errors(cid, lvl)
                if len(e):
                    out[(cid, lvl)] = {"n": len(e), "mean": float(e.mean()),
                                       "median": float(np.median(e))}
        return out


def center_error(oce_anchors, gt: Sequence[GTBox], max_distance: float = 4.0) -> CenterErrorResult:
    """Match each anchor to the nearest same-class GT centre within ``max_distance``."""
    centers = np.array([g.center for g in gt]).reshape(-1, 3)
    classes = np.array([g.class_id for g in gt], dtype=int)
    matches, unmatched = [], 0
    for ai, a in enumerate(oce_anchors):
        pos = np.asarray(a.position, dtype=float)
        same = np.flatnonzero(classes == a.class_id)
        if len(same) == 0:
            unmatched += 1
            continue
        d = np.linalg.norm(centers[same] - pos, axis=1)
        k = int(np.argmin(d))
        if d[k] > max_distance:
            unmatched += 1
            continue
        g = gt[same[k]]
        matches.append(CenterMatch(ai, int(same[k]), int(a.class_id),
                                   visibility_bin(g.visible_fraction), float(d[k]),
                                   float(np.linalg.norm(g.center) - np.linalg.norm(pos))))
    return CenterErrorResult(matches, unmatched)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def points_in_box(points, box: GTBox, margin: float = 0.1) -> int:
    """LiDAR returns inside ``box`` grown by ``margin`` on every side."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3) - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.column_stack([c * pts[:, 0] + s * pts[:, 1], -s * pts[:, 0] + c * pts[:, 1], pts[:, 2]])
    w, l, h = box.size
    half = np.array([l, w, h]) / 2.0 + margin
    return int(np.all(np.abs(local) <= half, axis=1).sum())


@dataclass
class SceneEval:
    scene_id: str
    levels: np.ndarray    # (n_gt,)
    classes: np.ndarray   # (n_gt,)
    covered: np.ndarray   # (n_gt,) bool
    errors: list          # (level, class_id, error) per matched OCE anchor
    unmatched: int = 0
    excluded: int = 0     # GT dropped for having too few LiDAR returns


def evaluate_scene(anchor_set: AnchorSet, gt: Sequence[GTBox], radius: float = 2.0,
                   match_distance: float = 4.0, include_background: bool = False,
                   points=None, min_lidar_points: int = 1) -> SceneEval:
    """Coverage and OCE centre error for one scene.

    With ``points`` given, GT boxes holding fewer than ``min_lidar_points``
    returns are left out, as nuScenes detection evaluation does.
    """
    n_all = len(gt)
    if points is not None and min_lidar_points > 0:
        gt = [g for g in gt if points_in_box(points, g) >= min_lidar_points]
    covered, _ = coverage(anchor_set, gt, radius, include_background)
    oce = [a for a in anchor_set.anchors if a.kind == "oce" and a.class_id is not None]
    ce = center_error(oce, gt, match_distance)
    return SceneEval(
        anchor_set.scene_id,
        np.array([visibility_bin(g.visible_fraction) for g in gt], dtype=int),
        np.array([g.class_id for g in gt], dtype=int),
        covered,
        [(m.level, m.class_id, m.error) for m in ce.matches],
        ce.unmatched,
        n_all - len(gt),
    )


@dataclass
class LevelRow:
    level: int
    gt_count: int
    covered: int
    n_err: int
    median_err_m: Optional[float]
    mean_err_m: Optional[float]
    per_class: dict  # class name -> {"gt_count", "covered"}

    @property
    def coverage(self) -> float:
        return self.covered / self.gt_count if self.gt_count else 0.0


@dataclass
class VisibilityReport:
    rows: list[LevelRow]
    total_gt: int
    n_scenes: int
    unmatched_anchors: int
    excluded_gt: int = 0

    def row(self, level: int) -> LevelRow:
        return self.rows[level - 1]

    def to_dict(self) -> dict:
        return {
            "n_scenes": self.n_scenes,
            "total_gt": self.total_gt,
            "unmatched_oce_anchors": self.unmatched_anchors,
            "excluded_gt": self.excluded_gt,
            "levels": [
                {"level": r.level, "gt_count": r.gt_count, "covered": r.covered,
                 "coverage": r.coverage, "n_err": r.n_err,
                 "median_err_m": r.median_err_m, "mean_err_m": r.mean_err_m,
                 "per_class": r.per_class}
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        header = ["level", "gt_count", "coverage", "median_err_m", "mean_err_m"]
        for name in CLASS_NAMES:
            header += [f"{name}_gt_count", f"{name}_coverage"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
        for r in self.rows:
            line = [r.level, r.gt_count, fmt(r.coverage), fmt(r.median_err_m), fmt(r.mean_err_m)]
            for name in CLASS_NAMES:
                pc = r.per_class[name]
                rate = pc["covered"] / pc["gt_count"] if pc["gt_count"] else None
                line += [pc["gt_count"], fmt(rate)]
            w.writerow(line)
        return buf.getvalue()


def report(evals: Sequence[SceneEval]) -> VisibilityReport:
    """Per-level aggregation over scenes, reduced in the given order."""
    if not evals:
        raise ValueError("report needs at least one scene")
    rows = []
    for lvl in LEVELS:
        gt_count = covered = 0
        per_class = {n: {"gt_count": 0, "covered": 0} for n in CLASS_NAMES}
        errs = []
        for ev in evals:
            sel = ev.levels == lvl
            gt_count += int(sel.sum())
            covered += int(ev.covered[sel].sum())
            for cid, cov in zip(ev.classes[sel], ev.covered[sel]):
                pc = per_class[CLASS_NAMES[cid]]
                pc["gt_count"] += 1
                pc["covered"] += int(cov)
            errs += [e for (l_, _, e) in ev.errors if l_ == lvl]
        e = np.array(errs)
        rows.append(LevelRow(lvl, gt_count, covered, len(errs),
                             float(np.median(e)) if len(e) else None,
                             float(e.mean()) if len(e) else None, per_class))
    total = sum(len(ev.levels) for ev in evals)
    if sum(r.gt_count for r in rows) != total:  # pragma: no cover - bookkeeping identity
        raise AssertionError("level counts do not sum to total GT")
    return VisibilityReport(rows, total, len(evals), sum(ev.unmatched for ev in evals),
                            sum(ev.excluded for ev in evals))

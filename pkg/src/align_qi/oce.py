"""Occlusion-aware centre estimation from LiDAR points and instance masks.

For each mask: gate the LiDAR points that project onto it, pick the four
closest to the mask's box centre in image space, fit a local pixel-to-3D
map on them, lift the box centre to the visible surface and push it
outward along the sensor ray by a per-class depth offset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import (DegenerateConfiguration, InsufficientPoints, SchemaError,
                     ZeroSurfacePoint)
from .geometry import (ProjectedCloud, RegionOfInterest, apply_homography,
                       estimate_homography, project_cloud)
from .scene_io import CLASS_NAMES, NUM_CLASSES, InstanceMask, Scene

log = logging.getLogger(__name__)

SUPPORT_SIZE = 4
MIN_SURFACE_NORM = 1e-6

# Upper end of the per-class offset ranges derived from box-size priors,
# in nuScenes class order.
DEPTH_OFFSET_MAX = (3.9, 7.6, 7.5, 7.4, 4.4, 1.4, 1.9, 1.5, 1.4, 2.0)
DEFAULT_DEPTH_OFFSETS = (1.5, 3.0, 3.0, 3.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class DepthOffsetTable:
    values: tuple = DEFAULT_DEPTH_OFFSETS

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != NUM_CLASSES:
            raise SchemaError(f"depth_offsets needs {NUM_CLASSES} values, got {len(vals)}")
        bad = [f"{CLASS_NAMES[i]}={v} not in [0, {DEPTH_OFFSET_MAX[i]}]"
               for i, v in enumerate(vals) if not 0.0 <= v <= DEPTH_OFFSET_MAX[i]]
        if bad:
            raise SchemaError("depth_offsets out of range: " + ", ".join(bad), bad)
        object.__setattr__(self, "values", vals)

    def __getitem__(self, class_id: int) -> float:
        return self.values[class_id]

    @classmethod
    def zeros(cls) -> "DepthOffsetTable":
        return cls((0.0,) * NUM_CLASSES)


class MaskPointSet(NamedTuple):
    """LiDAR points whose projections fall on one mask: the (u, v, x, y, z) tuples."""

    instance_id: int
    indices: np.ndarray  # (n,) indices into the scene cloud
    pixels: np.ndarray   # (n, 2)
    points: np.ndarray   # (n, 3)

    def __len__(self):
        return len(self.indices)


@dataclass
class OceAnchor:
    position: np.ndarray
    class_id: int
    instance_id: int
    surface_point: np.ndarray
    camera_id: int = 0
    fallback: bool = False
    clamped: bool = False


def raster_cells(pixels) -> np.ndarray:
    """Nearest integer cell (col, row) for continuous pixels; halves round up."""
    return np.floor(np.asarray(pixels, dtype=float) + 0.5).astype(np.int64)


def gate_points(scene: Scene, camera_id: int, mask: InstanceMask,
                projection: Optional[ProjectedCloud] = None) -> MaskPointSet:
    if mask.camera_id != camera_id:
        raise ValueError(f"mask {mask.instance_id} belongs to camera {mask.camera_id}, not {camera_id}")
    if projection is None:
        projection = project_cloud(scene.points, scene.camera(camera_id))
    cells = raster_cells(projection.pixels).reshape(-1, 2)
    h, w = mask.bitmap.shape
    ok = (cells[:, 0] >= 0) & (cells[:, 0] < w) & (cells[:, 1] >= 0) & (cells[:, 1] < h)
    hit = np.zeros(len(cells), dtype=bool)
    hit[ok] = mask.bitmap[cells[ok, 1], cells[ok, 0]]
    idx = projection.indices[hit]
    return MaskPointSet(mask.instance_id, idx, projection.pixels[hit], scene.points[idx])


def mask_center(mask: InstanceMask) -> tuple[float, float]:
    u0, v0, u1, v1 = mask.bbox
    return ((u0 + u1) / 2.0, (v0 + v1) / 2.0)


def select_support(points: MaskPointSet, center, k: int = SUPPORT_SIZE) -> MaskPointSet:
    """The ``k`` members nearest ``center`` in pixel space; ties go to the lower cloud index."""
    if len(points) < k:
        raise InsufficientPoints(f"instance {points.instance_id}: {len(points)} gated points < {k}")
    dist = np.hypot(points.pixels[:, 0] - center[0], points.pixels[:, 1] - center[1])
    order = np.lexsort((points.indices, dist))[:k]
    return MaskPointSet(points.instance_id, points.indices[order],
                        points.pixels[order], points.points[order])


def push_along_ray(surface_point, d: float) -> np.ndarray:
    p = np.asarray(surface_point, dtype=float)
    norm = np.linalg.norm(p)
    if norm < MIN_SURFACE_NORM:
        raise ZeroSurfacePoint(f"|p_surf| = {norm:.3g} m")
    return p + d * (p / norm)


def estimate_center(support: MaskPointSet, center, d: float) -> tuple[np.ndarray, np.ndarray]:
    """Returns (position, surface_point) for one instance."""
    H = estimate_homography(support.pixels, support.points)
    surface = apply_homography(H, center)
    return push_along_ray(surface, d), surface


def run_oce(scene: Scene, offsets: DepthOffsetTable,
            roi: Optional[RegionOfInterest] = None,
            diagnostics: Optional[list] = None) -> list[OceAnchor]:
    """One anchor per usable instance mask, in instance_id order.

    Per-instance failures are skipped and appended to ``diagnostics`` when given.
    """
    roi = roi or RegionOfInterest()
    projections: dict[int, ProjectedCloud] = {}
    anchors = []

    def note(mask, reason, **extra):
        log.debug("instance %d (camera %d): %s", mask.instance_id, mask.camera_id, reason)
        if diagnostics is not None:
            diagnostics.append({"instance_id": int(mask.instance_id),
                                "camera_id": int(mask.camera_id), "event": reason, **extra})

    for mask in sorted(scene.masks, key=lambda m: m.instance_id):
        cam = mask.camera_id
        if cam not in projections:
            projections[cam] = project_cloud(scene.points, scene.camera(cam))
        gated = gate_points(scene, cam, mask, projections[cam])
        center = mask_center(mask)
        d = offsets[mask.class_id]
        fallback = False
        try:
            support = select_support(gated, center)
        except InsufficientPoints:
            note(mask, "skipped_insufficient_points", gated=len(gated))
            continue
        try:
            try:
                position, surface = estimate_center(support, center, d)
            except DegenerateConfiguration:
                fallback = True
                surface = gated.points.mean(axis=0)
                position = push_along_ray(surface, d)
                note(mask, "degenerate_centroid_fallback")
        except ZeroSurfacePoint:
            note(mask, "skipped_zero_surface_point")
            continue
        clamped = not bool(roi.contains(position)[0])
        if clamped:
            position = roi.clamp(position)
            note(mask, "clamped_to_roi")
        anchors.append(OceAnchor(position, int(mask.class_id), int(mask.instance_id),
                                 surface, int(cam), fallback, clamped))
    return anchors

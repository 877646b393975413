"""Neighbour sampling around cluster cores with a mask-proximity filter."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from .clustering import Cluster
from .errors import SchemaError
from .geometry import RegionOfInterest, project_cloud
from .oce import raster_cells
from .scene_io import InstanceMask, Scene

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnsParams:
    range_ratio: float = 0.030
    s_offset: float = 30.0
    max_retries: int = 3
    per_core_target: int = 0
    bev: bool = False

    def __post_init__(self):
        problems = []
        if not self.range_ratio > 0:
            problems.append("ans.range_ratio must be > 0")
        if not self.s_offset >= 0:
            problems.append("ans.s_offset_px must be >= 0")
        if int(self.max_retries) != self.max_retries or self.max_retries < 1:
            problems.append("ans.max_retries must be an integer >= 1")
        if self.per_core_target < 0:
            problems.append("ans.per_core_target must be >= 0")
        if problems:
            raise SchemaError("; ".join(problems), problems)

    def radius(self, roi: RegionOfInterest) -> float:
        """Sampling radius in metres: a fraction of the ROI's x extent."""
        return self.range_ratio * roi.x_extent

    def to_dict(self) -> dict:
        return {"range_ratio": float(self.range_ratio), "s_offset_px": float(self.s_offset),
                "max_retries": int(self.max_retries), "bev": bool(self.bev)}


@dataclass
class NeighborAnchor:
    position: np.ndarray
    parent_cluster_id: int
    retry_round: int
    instance_id: int = -1
    mask_distance: float = 0.0


def sample_neighbors(core, r: float, n: int, rng: np.random.Generator,
                     bev: bool = False) -> np.ndarray:
    """``n`` points uniform in the open ball (or BEV disc) of radius ``r`` about ``core``.

    Rejection sampling from the bounding cube; the draw sequence depends only on ``rng``.
    """
    if not r > 0:
        raise ValueError("sampling radius must be > 0")
    core = np.asarray(core, dtype=float)
    dim = 2 if bev else 3
    out = []
    have = 0
    while have < n:
        batch = rng.uniform(-r, r, size=(max(2 * (n - have), 16), dim))
        batch = batch[np.einsum("ij,ij->i", batch, batch) < r * r]
        out.append(batch)
        have += len(batch)
    offs = np.concatenate(out)[:n] if out else np.zeros((0, dim))
    if bev:
        offs = np.column_stack([offs, np.zeros(len(offs))])
    return core + offs


class MaskField:
    """Distance (pixels) from every raster cell to the nearest true mask pixel of one camera.

    Overlapping masks resolve to the lowest instance id.
    """

    def __init__(self, masks: Sequence[InstanceMask], width: int, height: int):
        self.width, self.height = int(width), int(height)
        owner = np.full((self.height, self.width), -1, dtype=np.int64)
        for m in sorted(masks, key=lambda m: -m.instance_id):
            owner[m.bitmap] = m.instance_id
        if (owner < 0).all():
            self.distance = np.full(owner.shape, np.inf)
            self.owner = owner
        else:
            dist, (ri, ci) = distance_transform_edt(owner < 0, return_indices=True)
            self.distance = dist
            self.owner = owner[ri, ci]

    def lookup(self, pixels) -> tuple[np.ndarray, np.ndarray]:
        cells = raster_cells(pixels).reshape(-1, 2)
        u = np.clip(cells[:, 0], 0, self.width - 1)
        v = np.clip(cells[:, 1], 0, self.height - 1)
        return self.distance[v, u], self.owner[v, u]


def mask_distance(pixel, masks: Sequence[InstanceMask], width: int = None,
                  height: int = None) -> tuple[float, Optional[int]]:
    """(distance in pixels, nearest instance id) for one pixel; +inf and None without masks."""
    if width is None or height is None:
        if not masks:
            return float("inf"), None
        height, width = masks[0].bitmap.shape
    dist, owner = MaskField(masks, width, height).lookup([pixel])
    return float(dist[0]), (None if owner[0] < 0 else int(owner[0]))


class FilterResult(NamedTuple):
    kept: np.ndarray      # (n,) bool
    owner: np.ndarray     # (n,) instance id of the nearest mask, -1 if none
    distance: np.ndarray  # (n,) best mask distance over cameras, inf if never in view
    camera: np.ndarray    # (n,) camera giving that distance, -1 if none


def build_mask_fields(scene: Scene) -> dict[int, MaskField]:
    return {c.camera_id: MaskField(scene.masks_for(c.camera_id), c.image_width, c.image_height)
            for c in scene.cameras}


def semantic_filter(candidates, scene: Scene, s_offset: float,
                    fields: Optional[dict[int, MaskField]] = None) -> FilterResult:
    """Keep candidates that project, in at least one camera, strictly closer than
    ``s_offset`` pixels to some instance mask."""
    pts = np.asarray(candidates, dtype=float).reshape(-1, 3)
    n = len(pts)
    fields = fields if fields is not None else build_mask_fields(scene)
    best = np.full(n, np.inf)
    owner = np.full(n, -1, dtype=np.int64)
    camera = np.full(n, -1, dtype=np.int64)
    for cam in sorted(scene.cameras, key=lambda c: c.camera_id):
        proj = project_cloud(pts, cam)
        if len(proj) == 0:
            continue
        dist, own = fields[cam.camera_id].lookup(proj.pixels)
        better = dist < best[proj.indices]
        sel = proj.indices[better]
        best[sel] = dist[better]
        owner[sel] = own[better]
        camera[sel] = cam.camera_id
    return FilterResult(best < s_offset, owner, best, camera)


@dataclass
class AnsOutcome:
    anchors: list[NeighborAnchor]
    rounds: dict[int, int] = field(default_factory=dict)
    deficits: dict[int, int] = field(default_factory=dict)


def cluster_rng(seed, cluster_id: int) -> np.random.Generator:
    """Independent stream per cluster so results don't depend on processing order."""
    entropy = list(seed) if isinstance(seed, (list, tuple)) else seed
    return np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=(int(cluster_id),)))


def run_ans(clusters: Sequence[Cluster], scene: Scene, params: AnsParams, seed,
            targets: Optional[dict[int, int]] = None,
            roi: Optional[RegionOfInterest] = None,
            fields: Optional[dict[int, MaskField]] = None) -> AnsOutcome:
    """Sample, filter and retry per cluster until each reaches its target.

    ``targets`` maps cluster_id to a count (missing ids get none); without it
    every cluster aims for ``params.per_core_target``. Candidates outside the
    ROI are discarded.
    """
    roi = roi or RegionOfInterest()
    r = params.radius(roi)
    fields = fields if fields is not None else build_mask_fields(scene)
    result = AnsOutcome([])
    for cl in sorted(clusters, key=lambda c: c.cluster_id):
        target = params.per_core_target if targets is None else targets.get(cl.cluster_id, 0)
        if target <= 0:
            continue
        rng = cluster_rng(seed, cl.cluster_id)
        got: list[NeighborAnchor] = []
        rounds = 0
        while len(got) < target and rounds < params.max_retries:
            rounds += 1
            cand = sample_neighbors(cl.core_anchor, r, target, rng, params.bev)
            inside = roi.contains(cand) if len(cand) else np.zeros(0, dtype=bool)
            filt = semantic_filter(cand, scene, params.s_offset, fields)
            for k in np.flatnonzero(filt.kept & inside):
                got.append(NeighborAnchor(cand[k], cl.cluster_id, rounds,
                                          int(filt.owner[k]), float(filt.distance[k])))
        got = got[:target]
        result.rounds[cl.cluster_id] = rounds
        if len(got) < target:
            result.deficits[cl.cluster_id] = target - len(got)
            log.debug("cluster %d under-filled: %d/%d", cl.cluster_id, len(got), target)
        result.anchors.extend(got)
    return result

"""Query-budget balancing and assembly of the final fixed-size anchor set."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .ans import AnsParams, build_mask_fields, run_ans
from .clustering import Cluster, DbscanParams, dbscan, extract_clusters
from .errors import BudgetOverflow, SchemaError
from .geometry import RegionOfInterest, filter_roi
from .oce import DepthOffsetTable, OceAnchor, run_oce
from .scene_io import AnchorSet, QueryAnchor, Scene, read_json

log = logging.getLogger(__name__)

DEFAULT_SEED = 42
_CONFIG_KEYS = {"n_total", "r_bal", "seed", "roi", "dbscan", "ans", "depth_offsets"}
_ANS_KEYS = {"range_ratio", "s_offset_px", "max_retries", "bev"}


@dataclass(frozen=True)
class BalanceConfig:
    n_total: int = 900
    r_bal: float = 0.08
    seed: int = DEFAULT_SEED
    roi: RegionOfInterest = field(default_factory=RegionOfInterest)
    dbscan: DbscanParams = field(default_factory=DbscanParams)
    ans: AnsParams = field(default_factory=AnsParams)
    depth_offsets: DepthOffsetTable = field(default_factory=DepthOffsetTable)

    def __post_init__(self):
        problems = []
        if int(self.n_total) != self.n_total or self.n_total < 1:
            problems.append("n_total must be an integer >= 1")
        if not 0.0 <= self.r_bal <= 1.0:
            problems.append("r_bal must lie in [0, 1]")
        if problems:
            raise SchemaError("; ".join(problems), problems)

    def to_dict(self) -> dict:
        return {
            "n_total": int(self.n_total),
            "r_bal": float(self.r_bal),
            "seed": int(self.seed),
            "roi": self.roi.to_dict(),
            "dbscan": self.dbscan.to_dict(),
            "ans": self.ans.to_dict(),
            "depth_offsets": list(self.depth_offsets.values),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BalanceConfig":
        if not isinstance(d, dict):
            raise SchemaError("config: top level must be an object")
        unknown = sorted(set(d) - _CONFIG_KEYS)
        if unknown:
            raise SchemaError(f"config: unknown keys {unknown}")
        try:
            kw = {}
            if "n_total" in d:
                kw["n_total"] = int(d["n_total"])
            if "r_bal" in d:
                kw["r_bal"] = float(d["r_bal"])
            if "seed" in d:
                kw["seed"] = int(d["seed"])
            if "roi" in d:
                kw["roi"] = RegionOfInterest.from_dict(d["roi"])
            if "dbscan" in d:
                kw["dbscan"] = DbscanParams(**d["dbscan"])
            if "ans" in d:
                a = d["ans"]
                extra = sorted(set(a) - _ANS_KEYS)
                if extra:
                    raise SchemaError(f"config.ans: unknown keys {extra}")
                kw["ans"] = AnsParams(
                    range_ratio=float(a.get("range_ratio", AnsParams.range_ratio)),
                    s_offset=float(a.get("s_offset_px", AnsParams.s_offset)),
                    max_retries=int(a.get("max_retries", AnsParams.max_retries)),
                    bev=bool(a.get("bev", False)))
            if "depth_offsets" in d:
                kw["depth_offsets"] = DepthOffsetTable(tuple(d["depth_offsets"]))
        except (TypeError, ValueError, AttributeError) as exc:
            raise SchemaError(f"config: {exc}") from None
        return cls(**kw)

    def with_seed(self, seed: Optional[int]) -> "BalanceConfig":
        if seed is None:
            return self
        return replace(self, seed=int(seed))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_config(path) -> BalanceConfig:
    return BalanceConfig.from_dict(read_json(path))


@dataclass(frozen=True)
class BudgetSplit:
    n_oce: int
    n_cluster: int
    n_ans: int
    n_rand: int

    @property
    def total(self) -> int:
        return self.n_oce + self.n_cluster + self.n_ans + self.n_rand


def partition_budget(n_total: int, n_oce: int, n_cluster: int, r_bal: float) -> BudgetSplit:
    """Split what OCE and cluster anchors leave over; the neighbour share is floored.

    ``r_bal`` is taken at its shortest decimal value, so 0.29 * 100 gives 29,
    not the 28 binary rounding would give.
    """
    if n_oce + n_cluster > n_total:
        raise BudgetOverflow(f"{n_oce} OCE + {n_cluster} cluster anchors exceed budget {n_total}")
    if not 0.0 <= r_bal <= 1.0:
        raise ValueError("r_bal must lie in [0, 1]")
    remaining = n_total - n_oce - n_cluster
    n_ans = int(Fraction(repr(float(r_bal))) * remaining)  # floor for non-negatives
    return BudgetSplit(n_oce, n_cluster, n_ans, remaining - n_ans)


def allocate_per_object(n_ans: int, n_objects: int) -> list[int]:
    """Even split; the first ``n_ans % n_objects`` objects get one extra."""
    if n_objects < 0 or n_ans < 0:
        raise ValueError("counts must be non-negative")
    if n_objects == 0:
        return []
    base, extra = divmod(n_ans, n_objects)
    return [base + 1 if k < extra else base for k in range(n_objects)]


def sample_background(n_rand: int, roi: RegionOfInterest, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(roi.lower, roi.upper, size=(n_rand, 3))


def scene_key(scene_id: str) -> int:
    return int.from_bytes(hashlib.sha256(scene_id.encode("utf-8")).digest()[:4], "little")


@dataclass
class PipelineResult:
    anchor_set: AnchorSet
    split: BudgetSplit
    oce: list[OceAnchor]
    clusters: list[Cluster]
    n_ans_actual: int
    n_rand_actual: int
    diagnostics: dict


def _fit_budget(oce: list[OceAnchor], clusters: list[Cluster], n_total: int, notes: dict):
    if len(oce) > n_total:
        notes["dropped_oce"] = len(oce) - n_total
        oce = oce[:n_total]
    room = n_total - len(oce)
    if len(clusters) > room:
        # drop the least populated first; among equals, the later id
        keep = {c.cluster_id for c in
                sorted(clusters, key=lambda c: (-c.size, c.cluster_id))[:room]}
        notes["dropped_clusters"] = [c.cluster_id for c in clusters if c.cluster_id not in keep]
        clusters = [c for c in clusters if c.cluster_id in keep]
    return oce, clusters


def run_pipeline(scene: Scene, config: BalanceConfig) -> PipelineResult:
    roi = config.roi
    notes: dict = {"oce": []}
    key = scene_key(scene.scene_id)
    ans_seed = [int(config.seed), key, 1]
    bg_rng = np.random.default_rng([int(config.seed), key, 2])

    oce = run_oce(scene, config.depth_offsets, roi, diagnostics=notes["oce"])

    roi_idx, roi_pts = filter_roi(scene.points, roi)
    labeling = dbscan(roi_pts, config.dbscan)
    clusters = extract_clusters(roi_pts, labeling)
    for cl in clusters:
        cl.member_indices = roi_idx[cl.member_indices]
        cl.core_indices = roi_idx[cl.core_indices]

    oce, clusters = _fit_budget(oce, clusters, config.n_total, notes)
    split = partition_budget(config.n_total, len(oce), len(clusters), config.r_bal)
    per_object = allocate_per_object(split.n_ans, len(clusters))
    targets = {cl.cluster_id: t for cl, t in zip(clusters, per_object)}

    fields = build_mask_fields(scene) if clusters and split.n_ans else None
    ans = run_ans(clusters, scene, config.ans, ans_seed, targets, roi, fields) \
        if fields is not None else None
    neighbors = ans.anchors if ans else []
    n_rand = config.n_total - len(oce) - len(clusters) - len(neighbors)
    background = sample_background(n_rand, roi, bg_rng)

    anchors = [QueryAnchor(a.position, "oce", a.class_id, a.instance_id) for a in oce]
    anchors += [QueryAnchor(c.core_anchor, "cluster", None, c.cluster_id) for c in clusters]
    anchors += [QueryAnchor(a.position, "neighbor", None, a.parent_cluster_id) for a in neighbors]
    anchors += [QueryAnchor(p, "background") for p in background]
    if len(anchors) != config.n_total:  # pragma: no cover - guarded by construction
        raise AssertionError(f"assembled {len(anchors)} anchors, expected {config.n_total}")

    notes.update({
        "n_points": int(len(scene.points)),
        "n_masks": len(scene.masks),
        "planned": {"n_oce": split.n_oce, "n_cluster": split.n_cluster,
                    "n_ans": split.n_ans, "n_rand": split.n_rand},
        "actual": {"n_oce": len(oce), "n_cluster": len(clusters),
                   "n_ans": len(neighbors), "n_rand": int(n_rand)},
        "ans_deficits": {str(k): v for k, v in (ans.deficits if ans else {}).items()},
        "ans_rounds": {str(k): v for k, v in (ans.rounds if ans else {}).items()},
    })
    if split.n_ans and not clusters:
        notes["ans_budget_to_background"] = split.n_ans
    return PipelineResult(AnchorSet(anchors, config.digest(), scene.scene_id), split, oce,
                          clusters, len(neighbors), int(n_rand), notes)


def assemble(scene: Scene, config: BalanceConfig) -> AnchorSet:
    """OCE, clustering, budget split, neighbour sampling and background fill.

    Always returns exactly ``config.n_total`` anchors; any neighbour shortfall
    is filled with background anchors.
    """
    return run_pipeline(scene, config).anchor_set

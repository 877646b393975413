"""Density clustering of LiDAR points into object-candidate cores.

Neighbourhoods are closed balls (distance <= eps) and count the point
itself. Cluster ids follow the smallest core index of each cluster, and a
border point reachable from several clusters joins the lowest id: the
labelling a sequential scan in ascending index order would produce.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import NamedTuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import SchemaError

NOISE = -1

# self cell plus one of each +/- offset pair; mirrored pairs are added back
_HALF_OFFSETS = [o for o in product((-1, 0, 1), repeat=3) if o > (0, 0, 0)]


@dataclass(frozen=True)
class DbscanParams:
    eps: float = 0.6
    min_pts: int = 7

    def __post_init__(self):
        if not self.eps > 0:
            raise SchemaError("dbscan.eps must be > 0")
        if int(self.min_pts) != self.min_pts or self.min_pts < 1:
            raise SchemaError("dbscan.min_pts must be an integer >= 1")

    def to_dict(self) -> dict:
        return {"eps": float(self.eps), "min_pts": int(self.min_pts)}


class Labeling(NamedTuple):
    labels: np.ndarray  # (n,) cluster id or NOISE
    core: np.ndarray    # (n,) bool


@dataclass
class Cluster:
    cluster_id: int
    member_indices: np.ndarray
    core_indices: np.ndarray
    core_anchor: np.ndarray

    @property
    def size(self) -> int:
        return len(self.member_indices)


def _cell_pairs(keys_a, keys_b):
    """All (a, b) with keys_a[a] == keys_b[b]; keys_b must be sorted unique."""
    pos = np.searchsorted(keys_b, keys_a)
    pos = np.minimum(pos, len(keys_b) - 1)
    hit = keys_b[pos] == keys_a
    return np.flatnonzero(hit), pos[hit]


def neighbor_pairs(points, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Ordered index pairs (i, j), self pairs included, with |p_i - p_j| <= eps.

    Uses a uniform grid of cell size ``eps`` so only the 27 surrounding
    cells are examined per point.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    cells = np.floor(pts / eps).astype(np.int64)
    cells -= cells.min(axis=0) - 1
    dims = cells.max(axis=0) + 2
    flat = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    order = np.argsort(flat, kind="stable")
    ukeys, start, count = np.unique(flat[order], return_index=True, return_counts=True)
    eps2 = eps * eps

    out_i, out_j = [], []
    for off in [(0, 0, 0)] + _HALF_OFFSETS:
        shift = (off[0] * dims[1] + off[1]) * dims[2] + off[2]
        a, b = _cell_pairs(ukeys + shift, ukeys)
        if len(a) == 0:
            continue
        na, nb = count[a], count[b]
        sizes = na * nb
        total = int(sizes.sum())
        which = np.repeat(np.arange(len(a)), sizes)
        k = np.arange(total) - np.repeat(np.cumsum(sizes) - sizes, sizes)
        ia = order[start[a][which] + k // nb[which]]
        ib = order[start[b][which] + k % nb[which]]
        d = pts[ia] - pts[ib]
        close = np.einsum("ij,ij->i", d, d) <= eps2
        ia, ib = ia[close], ib[close]
        out_i.append(ia)
        out_j.append(ib)
        if off != (0, 0, 0):
            out_i.append(ib)
            out_j.append(ia)
    return np.concatenate(out_i), np.concatenate(out_j)


def dbscan(points, params: DbscanParams) -> Labeling:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return Labeling(labels, np.zeros(0, dtype=bool))
    i, j = neighbor_pairs(pts, params.eps)
    degree = np.bincount(i, minlength=n)
    core = degree >= params.min_pts
    core_idx = np.flatnonzero(core)
    if len(core_idx) == 0:
        return Labeling(labels, core)

    # connected components of the core-core graph
    local = np.full(n, -1, dtype=np.int64)
    local[core_idx] = np.arange(len(core_idx))
    cc = core[i] & core[j]
    graph = coo_matrix((np.ones(int(cc.sum()), dtype=np.int8), (local[i[cc]], local[j[cc]])),
                       shape=(len(core_idx), len(core_idx)))
    ncomp, comp = connected_components(graph, directed=False)

    # renumber components by their smallest core index
    first = np.full(ncomp, n, dtype=np.int64)
    np.minimum.at(first, comp, core_idx)
    rank = np.empty(ncomp, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(ncomp)
    labels[core_idx] = rank[comp]

    border = ~core[i] & core[j]
    if border.any():
        best = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(best, i[border], labels[j[border]])
        claimed = best != np.iinfo(np.int64).max
        labels[claimed] = best[claimed]
    return Labeling(labels, core)


def extract_clusters(points, labeling: Labeling) -> list[Cluster]:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    labels, core = labeling
    out = []
    if len(labels) == 0 or labels.max(initial=NOISE) == NOISE:
        return out
    for cid in range(int(labels.max()) + 1):
        members = np.flatnonzero(labels == cid)
        cores = members[core[members]]
        out.append(Cluster(cid, members, cores, pts[cores].mean(axis=0)))
    return out

"""Spatial refinement of provisional dynamic labels.

Dynamic points are clustered with a range-dependent linkage distance, small
or narrow clusters are dropped, voxel-adjacent clusters are merged into
groups, and each group is tested against the dilated static map. Every step
can only turn dynamic points static.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from raycull.consistency import VALIDATED, LabelSet
from raycull.voxel_map import VoxelMap, pack_keys, unpack_keys, voxel_keys


@dataclass(frozen=True)
class ValidationParams:
    """Thresholds for clustering, screening and group reclassification.

    ``size_coeff`` sets ``m(r) = max(m_min, ceil(size_coeff / r**2))`` and
    ``angular_width`` sets ``d(r) = max(d_min, angular_width * r)``.
    """

    eps0: float = 0.3
    eps1: float = 0.02
    size_coeff: float = 2000.0
    angular_width: float = 0.01
    m_min: int = 5
    d_min: float = 0.2
    dilation: int = 1
    theta_coverage: float = 0.8
    theta_edge: float = 0.4
    theta_thin: float = 0.3

    def __post_init__(self):
        values = (self.eps0, self.eps1, self.size_coeff, self.angular_width, self.m_min,
                  self.d_min, self.dilation, self.theta_coverage, self.theta_edge, self.theta_thin)
        if any(v < 0 for v in values):
            raise ValueError("validation thresholds must be non-negative")
        if self.theta_edge > self.theta_coverage:
            raise ValueError("theta_edge must not exceed theta_coverage")
        if self.theta_coverage > 1:
            raise ValueError("theta_coverage must lie in [0, 1]")

    def min_size(self, r: float) -> int:
        r = max(r, 1e-9)
        return max(self.m_min, math.ceil(self.size_coeff / (r * r)))

    def min_width(self, r: float) -> float:
        return max(self.d_min, self.angular_width * r)


@dataclass
class Cluster:
    members: np.ndarray
    median_range: float
    extent: np.ndarray

    def __len__(self) -> int:
        return len(self.members)

    @property
    def diam(self) -> float:
        """Horizontal diagonal of the bounding box."""
        return float(math.hypot(self.extent[0], self.extent[1]))


@dataclass
class Group:
    clusters: list[Cluster]
    members: np.ndarray
    extent: np.ndarray
    coverage: float | None = field(default=None)

    @property
    def thin(self) -> float:
        return float(self.extent.min())


def _extent(points: np.ndarray) -> np.ndarray:
    return points.max(axis=0) - points.min(axis=0)


def _components(n: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Connected-component labels, renumbered by smallest member index."""
    graph = coo_matrix((np.ones(len(a), dtype=np.int8), (a, b)), shape=(n, n))
    _, raw = connected_components(graph, directed=False)
    _, first = np.unique(raw, return_index=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[raw]


def _split(labels: np.ndarray) -> list[np.ndarray]:
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    return np.split(order, bounds)


def cluster_dynamic(points: np.ndarray, params: ValidationParams, ranges: np.ndarray | None = None) -> list[Cluster]:
    """Single-linkage clusters; ``a`` and ``b`` link iff ``|a-b| <= eps0 + eps1 * min(r_a, r_b)``.

    ``ranges`` are sensor ranges of the points (defaults to their norms).
    Clusters come back ordered by smallest member index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        return []
    ranges = np.linalg.norm(points, axis=1) if ranges is None else np.asarray(ranges, dtype=np.float64)
    radii = params.eps0 + params.eps1 * ranges
    tree = cKDTree(points)
    hoods = tree.query_ball_point(points, radii)
    lens = np.fromiter((len(h) for h in hoods), dtype=np.int64, count=n)
    src = np.repeat(np.arange(n), lens)
    dst = np.fromiter((k for h in hoods for k in h), dtype=np.int64, count=int(lens.sum()))
    # ball of the nearer point already bounds the pair by the min-range radius
    keep = ranges[dst] >= ranges[src]
    labels = _components(n, src[keep], dst[keep])
    out = []
    for members in _split(labels):
        out.append(Cluster(members, float(np.median(ranges[members])), _extent(points[members])))
    return out


def screen_clusters(clusters: list[Cluster], params: ValidationParams) -> tuple[list[Cluster], list[Cluster]]:
    """Split into (kept, rejected) by the range-adaptive size and width rules."""
    kept, rejected = [], []
    for c in clusters:
        r = c.median_range
        ok = len(c) >= params.min_size(r) and c.diam >= params.min_width(r)
        (kept if ok else rejected).append(c)
    return kept, rejected


def merge_groups(clusters: list[Cluster], points: np.ndarray, voxel_size: float) -> list[Group]:
    """Transitively merge clusters whose voxels touch (Chebyshev distance <= 1)."""
    if not clusters:
        return []
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cid = np.concatenate([np.full(len(c), k) for k, c in enumerate(clusters)])
    members = np.concatenate([c.members for c in clusters])
    ijk = voxel_keys(points[members], voxel_size)
    vox = np.unique(np.column_stack([pack_keys(ijk), cid]), axis=0)
    # unique already sorts by packed voxel, then cluster id
    vkey, vcid = vox[:, 0], vox[:, 1]
    a_list, b_list = [], []
    same = np.flatnonzero(vkey[1:] == vkey[:-1])
    a_list.append(vcid[same])
    b_list.append(vcid[same + 1])
    vijk = unpack_keys(vkey)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                nb = pack_keys(vijk + np.array([dx, dy, dz]))
                pos = np.searchsorted(vkey, nb)
                pos = np.minimum(pos, len(vkey) - 1)
                hit = vkey[pos] == nb
                a_list.append(vcid[hit])
                b_list.append(vcid[pos[hit]])
    labels = _components(len(clusters), np.concatenate(a_list), np.concatenate(b_list))
    groups = []
    for idx in _split(labels):
        parts = [clusters[k] for k in idx]
        mem = np.sort(np.concatenate([c.members for c in parts]))
        groups.append(Group(parts, mem, _extent(points[mem])))
    groups.sort(key=lambda g: int(g.members[0]))
    return groups


def group_coverage(group: Group, points: np.ndarray, vmap: VoxelMap, dilation: int) -> np.ndarray:
    """Per-member flag: inside the map dilated by ``dilation`` voxels."""
    return vmap.contains_dilated_many(points[group.members], dilation)


def reclassify_group(group: Group, points: np.ndarray, vmap: VoxelMap, params: ValidationParams) -> bool:
    """True if the group goes back to static (well covered, or thin and edge-covered)."""
    covered = group_coverage(group, points, vmap, params.dilation)
    group.coverage = float(covered.mean())
    return group.coverage >= params.theta_coverage or (
        group.coverage >= params.theta_edge and group.thin <= params.theta_thin
    )


def residual_cleanup(groups: list[Group], points: np.ndarray, vmap: VoxelMap, params: ValidationParams) -> np.ndarray:
    """Indices that revert to static within still-dynamic groups.

    Covered points always revert; if what remains is smaller than ``m_min``
    or narrower than ``d_min`` the whole group reverts.
    """
    out = []
    for g in groups:
        covered = group_coverage(g, points, vmap, params.dilation)
        rest = g.members[~covered]
        if len(rest) < params.m_min or math.hypot(*_extent(points[rest])[:2]) < params.d_min:
            out.append(g.members)
        else:
            out.append(g.members[covered])
    if not out:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(out))


def validate(labels: LabelSet, points: np.ndarray, ranges: np.ndarray, vmap: VoxelMap,
             params: ValidationParams) -> LabelSet:
    """Run the full refinement in place on ``labels`` and return it.

    ``points`` are world-frame and ``ranges`` sensor-frame, both aligned with
    ``labels``.
    """
    dyn = np.flatnonzero(labels.dynamic)
    if len(dyn) == 0:
        return labels
    sub = points[dyn]
    clusters = cluster_dynamic(sub, params, ranges[dyn])
    kept, rejected = screen_clusters(clusters, params)
    for c in rejected:
        labels.revert(dyn[c.members])
    still = []
    for g in merge_groups(kept, sub, vmap.voxel_size):
        if reclassify_group(g, sub, vmap, params):
            labels.revert(dyn[g.members])
        else:
            still.append(g)
    labels.revert(dyn[residual_cleanup(still, sub, vmap, params)])
    labels.stage[dyn[labels.dynamic[dyn]]] = VALIDATED
    return labels

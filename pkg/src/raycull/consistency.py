"""Scan-versus-map consistency test on the az-el grid.

Each populated bin compares its nearest scan return against a robust map
reference: a quantile of the finite first-hit distances in a square window
of bins around it. A bin whose return sits far enough in front of the map is
dynamic, and that verdict is shared by every point in the bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from raycull.azel import AzElGrid, bin_directions, fov_mask
from raycull.core import Pose
from raycull.voxel_map import VoxelMap, voxel_keys

RAY_TEST = 0
VALIDATED = 1
REVERTED = 2
STAGE_NAMES = {RAY_TEST: "ray_test", VALIDATED: "validated", REVERTED: "reverted"}


@dataclass(frozen=True)
class ConsistencyParams:
    r_n: int = 1
    q: float = 0.9
    tau0: float = 0.30
    tau1: float = 0.35

    def __post_init__(self):
        if self.r_n < 0:
            raise ValueError("r_n must be >= 0")
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie in (0, 1)")
        if self.tau0 < 0 or self.tau1 < 0:
            raise ValueError("tau0 and tau1 must be >= 0")


@dataclass
class LabelSet:
    """Per-point dynamic flags with the stage that last set each label."""

    dynamic: np.ndarray
    stage: np.ndarray

    @classmethod
    def all_static(cls, n: int) -> "LabelSet":
        return cls(np.zeros(n, dtype=bool), np.full(n, RAY_TEST, dtype=np.uint8))

    def __len__(self) -> int:
        return len(self.dynamic)

    def as_bytes(self) -> bytes:
        """One byte per point, 0 = static, 1 = dynamic."""
        return self.dynamic.astype(np.uint8).tobytes()

    def revert(self, idx: np.ndarray):
        """Force points back to static."""
        idx = np.asarray(idx, dtype=np.int64)
        moved = idx[self.dynamic[idx]]
        self.dynamic[moved] = False
        self.stage[moved] = REVERTED


def nearest_rank_index(q: float, n: int) -> int:
    """0-based index of the nearest-rank ``q``-quantile in a sorted sample of size ``n``.

    ``q`` is taken at its shortest decimal form, so q=0.7, n=10 gives rank 7
    rather than the 8 that float ``0.7 * 10`` would round up to.
    """
    return max(0, math.ceil(Fraction(repr(float(q))) * n) - 1)


def map_reference(grid: AzElGrid, i: int, j: int, params: ConsistencyParams) -> float | None:
    """Quantile of finite cast distances in the clipped window around ``(i, j)``; ``None`` if no hits."""
    r = params.r_n
    win = grid.cast[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1]
    hits = np.sort(win[np.isfinite(win)])
    if len(hits) == 0:
        return None
    return float(hits[nearest_rank_index(params.q, len(hits))])


def map_references(grid: AzElGrid, ii: np.ndarray, jj: np.ndarray, params: ConsistencyParams) -> np.ndarray:
    """Vectorized :func:`map_reference` for bins ``(ii, jj)``; ``nan`` marks no hits."""
    r = params.r_n
    n_az, n_el = grid.shape
    padded = np.full((n_az + 2 * r, n_el + 2 * r), np.inf)
    padded[r:r + n_az, r:r + n_el] = grid.cast
    w = 2 * r + 1
    stack = np.empty((w * w, len(ii)))
    k = 0
    for du in range(w):
        for dv in range(w):
            stack[k] = padded[ii + du, jj + dv]
            k += 1
    stack.sort(axis=0)
    n = np.isfinite(stack).sum(axis=0)
    rank = np.array([nearest_rank_index(params.q, k) for k in range(w * w + 1)])[n]
    ref = stack[rank, np.arange(len(ii))]
    ref[n == 0] = np.nan
    return ref


def classify_bin(d_scan: float, d_map: float, params: ConsistencyParams) -> bool:
    """True (dynamic) iff the return lies more than ``tau0 + tau1 * d_scan`` in front of the map."""
    return (d_map - d_scan) > params.tau0 + params.tau1 * d_scan


def classify_frame(grid: AzElGrid, params: ConsistencyParams) -> LabelSet:
    """Bin-level verdicts broadcast to all member points; bins without map hits stay static."""
    labels = LabelSet.all_static(len(grid.ranges))
    ii, jj = np.nonzero(grid.populated)
    if len(ii) == 0:
        return labels
    d_map = map_references(grid, ii, jj, params)
    d_scan = grid.scan_min[ii, jj]
    has_ref = ~np.isnan(d_map)
    dyn_bin = np.zeros(len(ii), dtype=bool)
    dyn_bin[has_ref] = (d_map[has_ref] - d_scan[has_ref]) > params.tau0 + params.tau1 * d_scan[has_ref]
    dyn_flat = np.zeros(grid.shape[0] * grid.shape[1], dtype=bool)
    dyn_flat[ii[dyn_bin] * grid.shape[1] + jj[dyn_bin]] = True
    pts = grid.order
    flat = grid.point_i[pts] * grid.shape[1] + grid.point_j[pts]
    labels.dynamic[pts[dyn_flat[flat]]] = True
    return labels


def collect_no_return(grid: AzElGrid, vmap: VoxelMap, pose: Pose, tau0: float = 0.30) -> tuple[int, int]:
    """Update the map's miss/hit counters from this frame's bins.

    A miss goes to the first-hit voxel of every in-FoV bin that has a cast
    hit but no return; a hit goes to the first-hit voxel of every bin whose
    nearest return agrees with the cast within ``tau0``. Returns
    ``(misses, hits)`` recorded.
    """
    finite = np.isfinite(grid.cast)
    miss = finite & ~grid.populated & fov_mask(grid)
    hit = finite & grid.populated
    hit[hit] = np.abs(grid.scan_min[hit] - grid.cast[hit]) <= tau0
    counts = []
    for mask, record in ((miss, vmap.record_misses), (hit, vmap.record_hits)):
        ii, jj = np.nonzero(mask)
        dirs = bin_directions(grid.spec, ii, jj) @ pose.rotation.T
        # nudge past the entry face so the sample falls inside the hit voxel
        lam = grid.cast[ii, jj] + 1e-3 * vmap.voxel_size
        pts = pose.translation + dirs * lam[:, None]
        record(voxel_keys(pts, vmap.voxel_size))
        counts.append(len(ii))
    return counts[0], counts[1]

"""Azimuth-elevation binning of a scan and the per-bin first-hit raycast cache."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numba as nb
import numpy as np
from scipy import ndimage

from raycull.core import Pose, Scan, range_of
from raycull.voxel_map import VoxelMap, _pack, table_contains

# TBB on some hosts is too old and numba warns on every parallel call.
nb.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

MIN_HIT = 1e-6
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class GridSpec:
    """Direction grid resolution and vertical field of view.

    ``beta_min``/``beta_max`` may be left as ``None``; :meth:`resolve` then
    fits them to the scan's observed elevation span, padded by one bin.
    """

    n_az: int = 720
    n_el: int = 450
    beta_min: float | None = None
    beta_max: float | None = None
    r_max: float = 60.0

    def __post_init__(self):
        if self.n_az < 1 or self.n_el < 1:
            raise ValueError("grid needs at least one bin per axis")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")
        if self.is_resolved and not self.beta_min < self.beta_max:
            raise ValueError("beta_min must be below beta_max")

    @property
    def is_resolved(self) -> bool:
        return self.beta_min is not None and self.beta_max is not None

    @property
    def d_alpha(self) -> float:
        return TWO_PI / self.n_az

    @property
    def d_beta(self) -> float:
        return (self.beta_max - self.beta_min) / self.n_el

    def resolve(self, points: np.ndarray) -> "GridSpec":
        if self.is_resolved:
            return self
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points):
            beta = elevations(points)
            lo, hi = float(beta.min()), float(beta.max())
        else:
            lo, hi = -0.5, 0.5
        if hi - lo < 1e-9:
            lo, hi = lo - 1e-3, hi + 1e-3
        pad = (hi - lo) / self.n_el
        return replace(
            self,
            beta_min=self.beta_min if self.beta_min is not None else lo - pad,
            beta_max=self.beta_max if self.beta_max is not None else hi + pad,
        )

    def alpha_centers(self) -> np.ndarray:
        return -math.pi + (np.arange(self.n_az) + 0.5) * self.d_alpha

    def beta_centers(self) -> np.ndarray:
        return self.beta_min + (np.arange(self.n_el) + 0.5) * self.d_beta


def azimuths(points: np.ndarray) -> np.ndarray:
    """arctan2(y, x) wrapped to (-pi, pi]."""
    alpha = np.arctan2(points[:, 1], points[:, 0])
    alpha[alpha <= -math.pi] = math.pi
    return alpha


def elevations(points: np.ndarray, ranges: np.ndarray | None = None) -> np.ndarray:
    if ranges is None:
        ranges = range_of(points)
    return np.arcsin(np.clip(points[:, 2] / ranges, -1.0, 1.0))


def bin_points(spec: GridSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bin indices ``(i, j)`` for sensor-frame points; ``-1`` marks out-of-FoV.

    Points must have strictly positive range.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ranges = range_of(points)
    if np.any(ranges <= 0):
        raise ValueError("zero-range point cannot be binned")
    alpha = azimuths(points)
    beta = elevations(points, ranges)
    i = np.floor((alpha + math.pi) / spec.d_alpha).astype(np.int64)
    np.clip(i, 0, spec.n_az - 1, out=i)
    j = np.floor((beta - spec.beta_min) / spec.d_beta).astype(np.int64)
    np.clip(j, 0, spec.n_el - 1, out=j)
    out = (beta < spec.beta_min) | (beta > spec.beta_max)
    i[out] = -1
    j[out] = -1
    return i, j


def bin_of(spec: GridSpec, p) -> tuple[int, int] | None:
    """Bin of a single sensor-frame point, or ``None`` when outside the vertical FoV."""
    i, j = bin_points(spec, np.asarray(p, dtype=np.float64).reshape(1, 3))
    if i[0] < 0:
        return None
    return int(i[0]), int(j[0])


def bin_directions(spec: GridSpec, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Sensor-frame unit vectors (N, 3) through the centers of bins ``(i, j)``."""
    a = -math.pi + (np.asarray(i) + 0.5) * spec.d_alpha
    b = spec.beta_min + (np.asarray(j) + 0.5) * spec.d_beta
    cb = np.cos(b)
    return np.stack([np.cos(a) * cb, np.sin(a) * cb, np.sin(b)], axis=-1)


def bin_direction_world(spec: GridSpec, pose: Pose, i: int, j: int) -> np.ndarray:
    u = bin_directions(spec, np.array([i]), np.array([j]))[0]
    return pose.rotation @ u


# --- voxel traversal --------------------------------------------------------


@nb.njit(inline="always")
def _boundary_t(idx, step, vs, o, d):
    if step > 0:
        return ((idx + 1) * vs - o) / d
    return (idx * vs - o) / d


@nb.njit(cache=True)
def _cast_one(table, vs, ox, oy, oz, dx, dy, dz, r_max, min_hit):
    inf = np.inf
    ix = np.int64(np.floor(ox / vs))
    iy = np.int64(np.floor(oy / vs))
    iz = np.int64(np.floor(oz / vs))
    if table_contains(table, _pack(ix, iy, iz)):
        return min_hit
    sx = 1 if dx > 0 else (-1 if dx < 0 else 0)
    sy = 1 if dy > 0 else (-1 if dy < 0 else 0)
    sz = 1 if dz > 0 else (-1 if dz < 0 else 0)
    tx = _boundary_t(ix, sx, vs, ox, dx) if sx != 0 else inf
    ty = _boundary_t(iy, sy, vs, oy, dy) if sy != 0 else inf
    tz = _boundary_t(iz, sz, vs, oz, dz) if sz != 0 else inf
    while True:
        if tx <= ty and tx <= tz:
            t = tx
            ix += sx
            tx = _boundary_t(ix, sx, vs, ox, dx)
        elif ty <= tz:
            t = ty
            iy += sy
            ty = _boundary_t(iy, sy, vs, oy, dy)
        else:
            t = tz
            iz += sz
            tz = _boundary_t(iz, sz, vs, oz, dz)
        if t > r_max:
            return inf
        if table_contains(table, _pack(ix, iy, iz)):
            return max(t, min_hit)


@nb.njit(cache=True, parallel=True)
def _cast_many(table, vs, origin, dirs, r_max, min_hit):
    n = dirs.shape[0]
    out = np.empty(n, dtype=np.float64)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for k in nb.prange(n):
        out[k] = _cast_one(table, vs, ox, oy, oz, dirs[k, 0], dirs[k, 1], dirs[k, 2], r_max, min_hit)
    return out


def cast_rays(vmap: VoxelMap, origin, dirs: np.ndarray, r_max: float) -> np.ndarray:
    """First-hit distances for many unit rays sharing one origin."""
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    if len(dirs) == 0 or len(vmap) == 0:
        return np.full(len(dirs), np.inf)
    return _cast_many(vmap.table, vmap.voxel_size, origin, dirs, float(r_max), MIN_HIT)


def cast_ray(vmap: VoxelMap, origin, direction, r_max: float) -> float:
    """Ray parameter at which ``origin + t * direction`` first enters an occupied voxel.

    Returns ``inf`` if no occupied voxel is entered with ``t <= r_max``. When
    the origin's own voxel is occupied the result is ``MIN_HIT``.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("direction must be a unit vector")
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    return float(cast_rays(vmap, origin, direction.reshape(1, 3), r_max)[0])


# --- grid ---------------------------------------------------------------------


@dataclass
class AzElGrid:
    """Per-frame direction grid.

    ``scan_min`` holds the nearest in-bin range (``inf`` when empty) and
    ``cast`` the map first-hit distance (``inf`` when not cast or no hit).
    Bin members are stored CSR-style: the points of flat bin ``b`` are
    ``order[offsets[b]:offsets[b + 1]]``.
    """

    spec: GridSpec
    point_i: np.ndarray
    point_j: np.ndarray
    ranges: np.ndarray
    scan_min: np.ndarray
    order: np.ndarray
    offsets: np.ndarray
    cast: np.ndarray
    cast_mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.spec.n_az, self.spec.n_el

    @property
    def populated(self) -> np.ndarray:
        return np.isfinite(self.scan_min)

    @property
    def in_fov(self) -> np.ndarray:
        return self.point_i >= 0

    def members(self, i: int, j: int) -> np.ndarray:
        b = i * self.spec.n_el + j
        return self.order[self.offsets[b]:self.offsets[b + 1]]

    def dump_cast_csv(self, path) -> None:
        """Write ``i,j,r_cast`` rows for every bin that was cast."""
        ii, jj = np.nonzero(self.cast_mask)
        with open(path, "w") as fh:
            fh.write("i,j,r_cast\n")
            for i, j, r in zip(ii.tolist(), jj.tolist(), self.cast[ii, jj].tolist()):
                fh.write(f"{i},{j},{r!r}\n")


def bin_scan(points: np.ndarray, spec: GridSpec) -> AzElGrid:
    """Fill bin membership and per-bin minimum range; leaves ``cast`` at ``inf``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    spec = spec.resolve(points)
    n_bins = spec.n_az * spec.n_el
    ranges = range_of(points)
    i, j = bin_points(spec, points)
    inside = np.flatnonzero(i >= 0)
    flat = i[inside] * spec.n_el + j[inside]
    order = inside[np.argsort(flat, kind="stable")]
    counts = np.bincount(flat, minlength=n_bins)
    offsets = np.zeros(n_bins + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    scan_min = np.full(n_bins, np.inf)
    np.minimum.at(scan_min, flat, ranges[inside])
    shape = (spec.n_az, spec.n_el)
    return AzElGrid(
        spec=spec,
        point_i=i,
        point_j=j,
        ranges=ranges,
        scan_min=scan_min.reshape(shape),
        order=order,
        offsets=offsets,
        cast=np.full(shape, np.inf),
        cast_mask=np.zeros(shape, dtype=bool),
    )


def fov_mask(grid: AzElGrid) -> np.ndarray:
    """Bins whose azimuth column and elevation row both received returns."""
    pop = grid.populated
    return np.outer(pop.any(axis=1), pop.any(axis=0))


def fill_cast(grid: AzElGrid, pose: Pose, vmap: VoxelMap, window: int = 0, no_return: bool = False) -> None:
    """Raycast every populated bin plus its ``window``-radius neighbours.

    With ``no_return`` all in-FoV bins (see :func:`fov_mask`) are cast too.
    """
    need = grid.populated
    if window > 0:
        need = ndimage.binary_dilation(need, structure=np.ones((2 * window + 1,) * 2, dtype=bool))
    if no_return:
        need = need | fov_mask(grid)
    ii, jj = np.nonzero(need)
    dirs = bin_directions(grid.spec, ii, jj) @ pose.rotation.T
    grid.cast[ii, jj] = cast_rays(vmap, pose.translation, dirs, grid.spec.r_max)
    grid.cast_mask[ii, jj] = True


def build_grid(
    scan: Scan,
    pose: Pose | None,
    vmap: VoxelMap,
    spec: GridSpec,
    window: int = 0,
    no_return: bool = False,
    timings: dict | None = None,
) -> AzElGrid:
    """Bin ``scan`` and fill the raycast cache from ``pose`` against ``vmap``."""
    pose = scan.pose if pose is None else pose
    t0 = time.perf_counter()
    grid = bin_scan(scan.points, spec)
    t1 = time.perf_counter()
    fill_cast(grid, pose, vmap, window=window, no_return=no_return)
    t2 = time.perf_counter()
    if timings is not None:
        timings["scan_binning"] = (t1 - t0) * 1e3
        timings["raycasting_cache"] = (t2 - t1) * 1e3
    return grid

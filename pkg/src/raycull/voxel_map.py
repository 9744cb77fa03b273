"""Sparse occupied-voxel map with Chebyshev dilation queries and evidence counters.

Voxel keys are ``floor(p / v)`` per axis. Internally each key is packed into
one non-negative int64 (21 bits per axis) and stored in an open-addressing
hash table so the jitted ray traversal can probe membership directly.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path

import numba as nb
import numpy as np

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_FIELD = (1 << _BITS) - 1
_EMPTY = -1
_MIN_CAPACITY = 1 << 10
_MAX_LOAD = 0.5


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel indices (N, 3) for points (N, 3); floor, not truncation."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.floor(points / voxel_size).astype(np.int64)


def pack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    if keys.size and (keys.min() < -_OFFSET or keys.max() >= _OFFSET):
        raise ValueError("voxel index out of packable range")
    k = keys + _OFFSET
    return (k[:, 0] << (2 * _BITS)) | (k[:, 1] << _BITS) | k[:, 2]


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    out = np.empty((len(packed), 3), dtype=np.int64)
    out[:, 0] = (packed >> (2 * _BITS)) & _FIELD
    out[:, 1] = (packed >> _BITS) & _FIELD
    out[:, 2] = packed & _FIELD
    return out - _OFFSET


@nb.njit(inline="always")
def _pack(ix, iy, iz):
    return ((ix + _OFFSET) << (2 * _BITS)) | ((iy + _OFFSET) << _BITS) | (iz + _OFFSET)


@nb.njit(inline="always")
def _slot(key, mask):
    h = np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)
    h ^= h >> np.uint64(31)
    return np.int64(h & np.uint64(mask))


@nb.njit(inline="always")
def table_contains(table, key):
    mask = len(table) - 1
    s = _slot(key, mask)
    while True:
        k = table[s]
        if k == key:
            return True
        if k == _EMPTY:
            return False
        s = (s + 1) & mask


@nb.njit(cache=True)
def _table_insert(table, keys):
    mask = len(table) - 1
    added = 0
    for key in keys:
        s = _slot(key, mask)
        while True:
            k = table[s]
            if k == key:
                break
            if k == _EMPTY:
                table[s] = key
                added += 1
                break
            s = (s + 1) & mask
    return added


@nb.njit(cache=True)
def _table_contains_many(table, keys):
    out = np.zeros(len(keys), dtype=np.bool_)
    for n in range(len(keys)):
        out[n] = table_contains(table, keys[n])
    return out


@nb.njit(cache=True)
def _table_contains_dilated(table, ijk, delta):
    out = np.zeros(len(ijk), dtype=np.bool_)
    for n in range(len(ijk)):
        ix, iy, iz = ijk[n, 0], ijk[n, 1], ijk[n, 2]
        found = False
        for dx in range(-delta, delta + 1):
            for dy in range(-delta, delta + 1):
                for dz in range(-delta, delta + 1):
                    if table_contains(table, _pack(ix + dx, iy + dy, iz + dz)):
                        found = True
                        break
                if found:
                    break
            if found:
                break
        out[n] = found
    return out


def _empty_table(capacity: int) -> np.ndarray:
    return np.full(capacity, _EMPTY, dtype=np.int64)


class VoxelMap:
    """Exact occupied-voxel set (no probabilistic decay) plus hit/miss counters.

    Counters are independent of occupancy: a key may carry counts without
    being occupied, and classification never resets them.
    """

    def __init__(self, voxel_size: float = 0.2):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self._table = _empty_table(_MIN_CAPACITY)
        self._size = 0
        self._miss: Counter[int] = Counter()
        self._hit: Counter[int] = Counter()

    def __len__(self) -> int:
        return self._size

    def __contains__(self, key) -> bool:
        packed = pack_keys(np.asarray(key, dtype=np.int64).reshape(1, 3))
        return bool(_table_contains_many(self._table, packed)[0])

    @property
    def table(self) -> np.ndarray:
        """Raw hash table, for jitted read-only consumers."""
        return self._table

    @property
    def occupied(self) -> set[tuple[int, int, int]]:
        return {tuple(int(c) for c in k) for k in self.keys()}

    def keys(self) -> np.ndarray:
        """Occupied voxel keys (N, 3), lexicographically sorted."""
        packed = np.sort(self._table[self._table != _EMPTY])
        return unpack_keys(packed)

    def key_of(self, p) -> tuple[int, int, int]:
        return tuple(int(c) for c in voxel_keys(p, self.voxel_size)[0])

    def _reserve(self, extra: int):
        need = self._size + extra
        if need <= _MAX_LOAD * len(self._table):
            return
        cap = len(self._table)
        while need > _MAX_LOAD * cap:
            cap *= 2
        old = self._table[self._table != _EMPTY]
        self._table = _empty_table(cap)
        _table_insert(self._table, old)

    def insert_keys(self, keys: np.ndarray) -> int:
        """Insert integer voxel keys (N, 3); returns how many were new."""
        packed = np.unique(pack_keys(keys))
        self._reserve(len(packed))
        added = int(_table_insert(self._table, packed))
        self._size += added
        return added

    def insert_points(self, points: np.ndarray) -> int:
        """Mark the voxels of world-frame ``points`` occupied; idempotent per voxel."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("cannot insert non-finite points")
        return self.insert_keys(voxel_keys(points, self.voxel_size))

    def contains_keys(self, keys: np.ndarray) -> np.ndarray:
        return _table_contains_many(self._table, pack_keys(keys))

    def contains_dilated_many(self, points: np.ndarray, delta: int) -> np.ndarray:
        """Vectorized :meth:`contains_dilated` over a cloud (N, 3)."""
        if delta < 0:
            raise ValueError("dilation must be non-negative")
        ijk = voxel_keys(points, self.voxel_size)
        return _table_contains_dilated(self._table, ijk, int(delta))

    def contains_dilated(self, p, delta: int = 0) -> bool:
        """True iff an occupied voxel lies within Chebyshev distance ``delta`` of key(p)."""
        return bool(self.contains_dilated_many(np.asarray(p).reshape(1, 3), delta)[0])

    # --- evidence counters -------------------------------------------------

    def record_miss(self, key, count: int = 1):
        self._miss[int(pack_keys(np.asarray(key).reshape(1, 3))[0])] += count

    def record_hit(self, key, count: int = 1):
        self._hit[int(pack_keys(np.asarray(key).reshape(1, 3))[0])] += count

    def record_misses(self, keys: np.ndarray):
        self._bump(self._miss, keys)

    def record_hits(self, keys: np.ndarray):
        self._bump(self._hit, keys)

    @staticmethod
    def _bump(counter: Counter, keys: np.ndarray):
        if len(keys) == 0:
            return
        uniq, counts = np.unique(pack_keys(keys), return_counts=True)
        for k, c in zip(uniq.tolist(), counts.tolist()):
            counter[k] += c

    def miss_count(self, key) -> int:
        return self._miss.get(int(pack_keys(np.asarray(key).reshape(1, 3))[0]), 0)

    def hit_count(self, key) -> int:
        return self._hit.get(int(pack_keys(np.asarray(key).reshape(1, 3))[0]), 0)

    def apply_evidence(self, miss_threshold: int) -> set[tuple[int, int, int]]:
        """Drop occupied voxels with ``miss >= threshold`` and ``miss > hit``."""
        if miss_threshold < 1:
            raise ValueError("miss_threshold must be >= 1")
        doomed = [
            k for k, m in self._miss.items()
            if m >= miss_threshold and m > self._hit.get(k, 0)
        ]
        if not doomed:
            return set()
        doomed = np.array(sorted(doomed), dtype=np.int64)
        doomed = doomed[_table_contains_many(self._table, doomed)]
        if len(doomed) == 0:
            return set()
        keep = self._table[self._table != _EMPTY]
        keep = keep[~np.isin(keep, doomed)]
        self._table = _empty_table(len(self._table))
        _table_insert(self._table, keep)
        self._size = len(keep)
        return {tuple(int(c) for c in k) for k in unpack_keys(doomed)}

    # --- text dump ----------------------------------------------------------

    def dump(self, path) -> None:
        """Write one ``ix iy iz`` line per occupied voxel, sorted."""
        lines = [f"{k[0]} {k[1]} {k[2]}\n" for k in self.keys().tolist()]
        Path(path).write_text("".join(lines))

    @classmethod
    def load(cls, path, voxel_size: float = 0.2) -> "VoxelMap":
        vmap = cls(voxel_size)
        text = Path(path).read_text().split()
        if len(text) % 3:
            raise ValueError(f"{path}: voxel dump must hold 3 integers per line")
        if text:
            vmap.insert_keys(np.array(text, dtype=np.int64).reshape(-1, 3))
        return vmap

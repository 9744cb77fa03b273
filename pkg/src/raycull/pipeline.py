"""Frame-by-frame orchestration: bootstrap, raycast test, validation, map update."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numba
import numpy as np

from raycull import __version__
from raycull.azel import GridSpec, build_grid
from raycull.consistency import ConsistencyParams, LabelSet, classify_frame, collect_no_return
from raycull.core import Pose, Scan
from raycull.dataset_io import SequenceSource
from raycull.validation import ValidationParams, validate
from raycull.voxel_map import VoxelMap, _table_contains_many, _table_insert, _empty_table, pack_keys, voxel_keys

log = logging.getLogger(__name__)

MAP_MODES = ("incremental", "two_pass")
STAGES = ("scan_binning", "raycasting_cache", "classification", "no_return_evidence", "validation")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    consistency: ConsistencyParams = field(default_factory=ConsistencyParams)
    validation: ValidationParams = field(default_factory=ValidationParams)
    voxel_size: float = 0.2
    min_range: float = 0.5
    map_mode: str = "incremental"
    evidence: bool = False
    miss_threshold: int = 3

    def __post_init__(self):
        if self.map_mode not in MAP_MODES:
            raise ConfigError(f"map_mode must be one of {MAP_MODES}")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if self.miss_threshold < 1:
            raise ConfigError("miss_threshold must be >= 1")
        if not 0 <= self.min_range < self.grid.r_max:
            raise ConfigError("min_range must lie in [0, range_limit)")

    # flat key -> (section, attribute, parser); section None means top level
    _KEYS = {
        "n_az": ("grid", "n_az", int),
        "n_el": ("grid", "n_el", int),
        "beta_min": ("grid", "beta_min", "angle"),
        "beta_max": ("grid", "beta_max", "angle"),
        "range_limit": ("grid", "r_max", float),
        "r_n": ("consistency", "r_n", int),
        "q": ("consistency", "q", float),
        "tau0": ("consistency", "tau0", float),
        "tau1": ("consistency", "tau1", float),
        "eps0": ("validation", "eps0", float),
        "eps1": ("validation", "eps1", float),
        "size_coeff": ("validation", "size_coeff", float),
        "angular_width": ("validation", "angular_width", float),
        "m_min": ("validation", "m_min", int),
        "d_min": ("validation", "d_min", float),
        "dilation": ("validation", "dilation", int),
        "theta_coverage": ("validation", "theta_coverage", float),
        "theta_edge": ("validation", "theta_edge", float),
        "theta_thin": ("validation", "theta_thin", float),
        "voxel_size": (None, "voxel_size", float),
        "min_range": (None, "min_range", float),
        "map_mode": (None, "map_mode", str),
        "evidence": (None, "evidence", "bool"),
        "miss_threshold": (None, "miss_threshold", int),
    }

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "PipelineConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
        parts: dict = {"grid": {}, "consistency": {}, "validation": {}, None: {}}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            where = f"{source}:{lineno}"
            if not sep or not val:
                raise ConfigError(f"{where}: expected 'key = value'")
            if key not in cls._KEYS:
                raise ConfigError(f"{where}: unknown key '{key}'")
            section, attr, kind = cls._KEYS[key]
            try:
                parts[section][attr] = _parse_value(val, kind)
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {key}: {exc}") from None
        try:
            return cls(
                grid=GridSpec(**parts["grid"]),
                consistency=ConsistencyParams(**parts["consistency"]),
                validation=ValidationParams(**parts["validation"]),
                **parts[None],
            )
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), str(path))

    def items(self) -> list[tuple[str, object]]:
        out = []
        for key, (section, attr, _) in self._KEYS.items():
            obj = self if section is None else getattr(self, section)
            out.append((key, getattr(obj, attr)))
        return out

    def to_text(self) -> str:
        lines = []
        for key, val in self.items():
            if val is None:
                val = "auto"
            elif isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


def _parse_value(val: str, kind):
    if kind == "angle":
        return None if val.lower() == "auto" else float(val)
    if kind == "bool":
        low = val.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    return kind(val)


@dataclass
class StageTiming:
    scan_binning: float = 0.0
    raycasting_cache: float = 0.0
    classification: float = 0.0
    no_return_evidence: float = 0.0
    validation: float = 0.0
    total: float = 0.0
    bootstrap: bool = False


@dataclass
class StageSummary:
    frames: int
    mean_ms: dict
    percent: dict
    total_ms: float

    def to_csv(self) -> str:
        rows = ["stage,time_ms,percent"]
        rows += [f"{s},{self.mean_ms[s]:.3f},{self.percent[s]:.1f}" for s in STAGES]
        rows.append(f"total,{self.total_ms:.3f},100.0")
        return "\n".join(rows) + "\n"

    def to_text(self) -> str:
        rows = [f"{'Stage':<22}{'Time [ms]':>12}{'Percentage [%]':>17}"]
        for s in STAGES:
            rows.append(f"{s.replace('_', ' ').capitalize():<22}{self.mean_ms[s]:>12.2f}{self.percent[s]:>17.1f}")
        rows.append(f"{'Total':<22}{self.total_ms:>12.2f}{100.0:>17.1f}")
        rows.append(f"({self.frames} frames averaged)")
        return "\n".join(rows) + "\n"


def stage_report(timings: list[StageTiming]) -> StageSummary:
    """Mean per-stage time and share of the summed stage time, bootstrap frames excluded.

    The listed stages share 100 %; ``total`` additionally includes map
    insertion and bookkeeping.
    """
    rows = [t for t in timings if not t.bootstrap]
    if not rows:
        raise ValueError("no processed frames to report")
    mean = {s: float(np.mean([getattr(t, s) for t in rows])) for s in STAGES}
    denom = sum(mean.values())
    pct = {s: (100.0 * mean[s] / denom if denom > 0 else 100.0 / len(STAGES)) for s in STAGES}
    return StageSummary(len(rows), mean, pct, float(np.mean([t.total for t in rows])))


class VoxelCloud:
    """Voxel-downsampled point accumulator keeping the first point seen per voxel."""

    def __init__(self, voxel_size: float):
        self.voxel_size = voxel_size
        self._table = _empty_table(1 << 12)
        self._count = 0
        self._chunks: list[np.ndarray] = []
        self._keys: list[np.ndarray] = []

    def __len__(self) -> int:
        return self._count

    def add(self, points: np.ndarray) -> None:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            return
        packed = pack_keys(voxel_keys(points, self.voxel_size))
        _, first = np.unique(packed, return_index=True)
        first.sort()
        fresh = first[~_table_contains_many(self._table, packed[first])]
        if len(fresh) == 0:
            return
        while (self._count + len(fresh)) * 2 > len(self._table):
            old = self._table[self._table >= 0]
            self._table = _empty_table(len(self._table) * 2)
            _table_insert(self._table, old)
        _table_insert(self._table, packed[fresh])
        self._count += len(fresh)
        self._chunks.append(points[fresh])
        self._keys.append(packed[fresh])

    def points(self) -> np.ndarray:
        return np.concatenate(self._chunks) if self._chunks else np.empty((0, 3))

    def packed_keys(self) -> np.ndarray:
        return np.concatenate(self._keys) if self._keys else np.empty(0, dtype=np.int64)


@dataclass
class RunResult:
    labels: list[LabelSet]
    static_map: np.ndarray
    timings: list[StageTiming]
    frame_ids: list[int]
    voxel_map: VoxelMap

    def summary(self) -> StageSummary:
        return stage_report(self.timings)


def set_threads(n: int | None) -> int:
    """Cap numba's worker count; returns the count in effect."""
    if n is None:
        return numba.get_num_threads()
    if n < 1:
        raise ValueError("thread count must be >= 1")
    avail = numba.config.NUMBA_NUM_THREADS
    if n > avail:
        log.info("requested %d threads, only %d available", n, avail)
    numba.set_num_threads(min(n, avail))
    return numba.get_num_threads()


class Pipeline:
    """Incremental single-owner processor; call :meth:`process` once per frame in order."""

    def __init__(self, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        self.map = VoxelMap(self.config.voxel_size)
        self.static_cloud = VoxelCloud(self.config.voxel_size)

    def _prepare(self, points: np.ndarray, pose: Pose, frame_id: int):
        full = Scan(points, pose, frame_id)
        scan, keep = full.filtered(self.config.min_range, self.config.grid.r_max)
        return scan, keep

    def classify(self, scan: Scan, world: np.ndarray, timing: StageTiming) -> tuple[LabelSet, object]:
        """Raycast test plus validation against the current map (read-only)."""
        cfg = self.config
        stages: dict = {}
        grid = build_grid(scan, scan.pose, self.map, cfg.grid, window=cfg.consistency.r_n,
                          no_return=cfg.evidence, timings=stages)
        timing.scan_binning = stages["scan_binning"]
        timing.raycasting_cache = stages["raycasting_cache"]
        t0 = time.perf_counter()
        labels = classify_frame(grid, cfg.consistency)
        t1 = time.perf_counter()
        validate(labels, world, grid.ranges, self.map, cfg.validation)
        t2 = time.perf_counter()
        timing.classification = (t1 - t0) * 1e3
        timing.validation = (t2 - t1) * 1e3
        return labels, grid

    def process(self, points: np.ndarray, pose: Pose, frame_id: int = 0) -> tuple[LabelSet, StageTiming]:
        """Label one frame and fold its static points into the map.

        Returned labels cover every input point; points outside the range
        window are static.
        """
        t_start = time.perf_counter()
        timing = StageTiming()
        scan, keep = self._prepare(points, pose, frame_id)
        out = LabelSet.all_static(len(keep))
        if len(scan) == 0:
            log.warning("frame %d: no points in range, skipped", frame_id)
            timing.bootstrap = True
            return out, timing
        world = scan.world_points()
        if len(self.map) == 0:
            labels = LabelSet.all_static(len(scan))
            timing.bootstrap = True
        else:
            labels, grid = self.classify(scan, world, timing)
        static = world[~labels.dynamic]
        self.map.insert_points(static)
        self.static_cloud.add(static)
        if self.config.evidence and not timing.bootstrap:
            t0 = time.perf_counter()
            collect_no_return(grid, self.map, pose, self.config.consistency.tau0)
            removed = self.map.apply_evidence(self.config.miss_threshold)
            if removed:
                log.debug("frame %d: evidence removed %d voxels", frame_id, len(removed))
            timing.no_return_evidence = (time.perf_counter() - t0) * 1e3
        out.dynamic[keep] = labels.dynamic
        out.stage[keep] = labels.stage
        timing.total = (time.perf_counter() - t_start) * 1e3
        return out, timing


def _iter_frames(source) -> Iterable[tuple[int, np.ndarray, Pose]]:
    if isinstance(source, SequenceSource):
        poses = source.poses
        for k in source.frames():
            yield k, source.load_points(k), poses[k]
    else:
        for k, (pts, pose) in enumerate(source):
            yield k, np.asarray(pts, dtype=np.float64).reshape(-1, 3), pose


def run_sequence(source, config: PipelineConfig | None = None, threads: int | None = None) -> RunResult:
    """Process a whole sequence.

    ``source`` is a :class:`SequenceSource` or an iterable of
    ``(points, pose)`` pairs.
    """
    config = config or PipelineConfig()
    if threads is not None:
        set_threads(threads)
    frames = list(_iter_frames(source))
    if not frames:
        raise ValueError("empty sequence")
    if config.map_mode == "two_pass":
        return _run_two_pass(frames, config)
    pipe = Pipeline(config)
    labels, timings, ids = [], [], []
    for k, pts, pose in frames:
        lab, tim = pipe.process(pts, pose, k)
        labels.append(lab)
        timings.append(tim)
        ids.append(k)
    return RunResult(labels, pipe.static_cloud.points(), timings, ids, pipe.map)


def _run_two_pass(frames, config: PipelineConfig) -> RunResult:
    pipe = Pipeline(config)
    accumulated = VoxelCloud(config.voxel_size)
    scans = []
    for k, pts, pose in frames:
        scan, keep = pipe._prepare(pts, pose, k)
        world = scan.world_points()
        pipe.map.insert_points(world)
        accumulated.add(world)
        scans.append((scan, keep, world))
    labels, timings, ids = [], [], []
    dynamic_keys = []
    for (k, pts, pose), (scan, keep, world) in zip(frames, scans):
        t_start = time.perf_counter()
        timing = StageTiming()
        out = LabelSet.all_static(len(keep))
        if len(scan):
            lab, grid = pipe.classify(scan, world, timing)
            if config.evidence:
                t0 = time.perf_counter()
                collect_no_return(grid, pipe.map, pose, config.consistency.tau0)
                timing.no_return_evidence = (time.perf_counter() - t0) * 1e3
            dynamic_keys.append(pack_keys(voxel_keys(world[lab.dynamic], config.voxel_size)))
            out.dynamic[keep] = lab.dynamic
            out.stage[keep] = lab.stage
        else:
            timing.bootstrap = True
        timing.total = (time.perf_counter() - t_start) * 1e3
        labels.append(out)
        timings.append(timing)
        ids.append(k)
    drop = np.unique(np.concatenate(dynamic_keys)) if dynamic_keys else np.empty(0, dtype=np.int64)
    if config.evidence:
        removed = pipe.map.apply_evidence(config.miss_threshold)
        if removed:
            drop = np.union1d(drop, pack_keys(np.array(sorted(removed))))
    keep_pts = ~np.isin(accumulated.packed_keys(), drop)
    return RunResult(labels, accumulated.points()[keep_pts], timings, ids, pipe.map)


def run_metadata(config: PipelineConfig, extra: dict | None = None) -> str:
    """Text block listing every effective parameter and the package version."""
    unpublished = {f.name for f in fields(ValidationParams)} | {"min_range", "map_mode", "evidence", "miss_threshold"}
    lines = [f"# raycull {__version__}", f"version = {__version__}"]
    for key, val in config.items():
        attr = PipelineConfig._KEYS[key][1]
        note = "  # implementation default, no published value" if attr in unpublished else ""
        if val is None:
            val = "auto"
        lines.append(f"{key} = {val}{note}")
    for key, val in (extra or {}).items():
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"

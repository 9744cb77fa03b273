"""Deterministic synthetic LiDAR sequences with ground-truth motion flags.

Scenes are built from axis-aligned boxes and a rectangular ground plane.
Rays are cast analytically at the sensor's beam-grid centers, so every
return lies exactly on a primitive surface (before optional range noise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from raycull.core import Pose
from raycull.dataset_io import write_labels, write_poses, write_scan

GROUND_CLASS = 40
STATIC_CLASS = 50
MOVING_CLASS = 252


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if any(h - l <= 0 for l, h in zip(lo, hi)):
            raise ValueError(f"degenerate box {lo} -> {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Entry distance per ray (inf on miss) via the slab method."""
        lo, hi = np.array(self.lo), np.array(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        parallel = dirs == 0
        inside = (origin >= lo) & (origin <= hi)
        tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        near = tmin.max(axis=1)
        far = tmax.min(axis=1)
        t = np.where(near > 0, near, far)
        return np.where((near <= far) & (t > 0), t, np.inf)


@dataclass(frozen=True)
class Ground:
    """Horizontal rectangle at height ``z``."""

    z: float = 0.1
    xmin: float = -50.0
    xmax: float = 50.0
    ymin: float = -50.0
    ymax: float = 50.0

    def __post_init__(self):
        if self.xmax <= self.xmin or self.ymax <= self.ymin:
            raise ValueError("degenerate ground rectangle")

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z - origin[2]) / dirs[:, 2]
        x = origin[0] + t * dirs[:, 0]
        y = origin[1] + t * dirs[:, 1]
        ok = (t > 0) & (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)
        return np.where(ok, t, np.inf)


@dataclass(frozen=True)
class MovingBox:
    """Box of ``size`` whose center moves ``velocity`` meters per frame.

    Present for frames ``start <= k < start + count`` (``count=None``: forever).
    """

    size: tuple[float, float, float]
    center: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    start: int = 0
    count: int | None = None

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError("degenerate moving box")
        if not all(math.isfinite(v) for v in (*self.center, *self.velocity)):
            raise ValueError("non-finite trajectory")

    def at(self, frame: int) -> Box | None:
        if frame < self.start or (self.count is not None and frame >= self.start + self.count):
            return None
        c = np.array(self.center) + (frame - self.start) * np.array(self.velocity)
        h = np.array(self.size) / 2
        return Box(tuple(c - h), tuple(c + h))


@dataclass(frozen=True)
class SensorModel:
    """Beam grid: ``n_az`` columns across the azimuth window, ``n_el`` rows across [beta_min, beta_max]."""

    n_az: int = 1024
    n_el: int = 64
    beta_min: float = math.radians(-25.0)
    beta_max: float = math.radians(3.0)
    max_range: float = 80.0
    fov_center: float = 0.0
    fov_width: float = 2 * math.pi
    noise: float = 0.0

    def __post_init__(self):
        if self.n_az < 1 or self.n_el < 1 or self.beta_max <= self.beta_min:
            raise ValueError("invalid sensor grid")
        if not 0 < self.fov_width <= 2 * math.pi:
            raise ValueError("fov_width must lie in (0, 2*pi]")

    def directions(self) -> np.ndarray:
        """Sensor-frame unit vectors, row-major over (azimuth, elevation)."""
        a = self.fov_center - self.fov_width / 2 + (np.arange(self.n_az) + 0.5) * self.fov_width / self.n_az
        b = self.beta_min + (np.arange(self.n_el) + 0.5) * (self.beta_max - self.beta_min) / self.n_el
        A, B = np.meshgrid(a, b, indexing="ij")
        A, B = A.ravel(), B.ravel()
        return np.stack([np.cos(A) * np.cos(B), np.sin(A) * np.cos(B), np.sin(B)], axis=1)


@dataclass
class SceneScript:
    frames: int
    sensor: SensorModel = field(default_factory=SensorModel)
    poses: list[Pose] = field(default_factory=list)
    ground: Ground | None = None
    boxes: list[Box] = field(default_factory=list)
    movers: list[MovingBox] = field(default_factory=list)
    seed: int = 0

    def pose(self, k: int) -> Pose:
        if not self.poses:
            return Pose()
        return self.poses[k] if k < len(self.poses) else self.poses[-1]

    def without_movers(self) -> "SceneScript":
        return SceneScript(self.frames, self.sensor, list(self.poses), self.ground, list(self.boxes), [], self.seed)


@dataclass
class SynthFrame:
    points: np.ndarray
    pose: Pose
    moving: np.ndarray
    classes: np.ndarray
    ray_index: np.ndarray


def generate(script: SceneScript) -> list[SynthFrame]:
    """Render every frame; nearest surface wins, misses produce no point."""
    rng = np.random.default_rng(script.seed)
    u = script.sensor.directions()
    frames = []
    for k in range(script.frames):
        pose = script.pose(k)
        # drawn for every ray so noise does not depend on what was hit
        jitter = rng.normal(0.0, script.sensor.noise, len(u)) if script.sensor.noise > 0 else None
        origin = pose.translation
        dirs = u @ pose.rotation.T
        best = np.full(len(u), np.inf)
        cls = np.zeros(len(u), dtype=np.uint16)
        prims = []
        if script.ground is not None:
            prims.append((script.ground, GROUND_CLASS))
        prims += [(b, STATIC_CLASS) for b in script.boxes]
        prims += [(m.at(k), MOVING_CLASS) for m in script.movers if m.at(k) is not None]
        for prim, c in prims:
            t = prim.intersect(origin, dirs)
            closer = t < best
            best[closer] = t[closer]
            cls[closer] = c
        hit = np.flatnonzero(best <= script.sensor.max_range)
        r = best[hit]
        if jitter is not None:
            r = r + jitter[hit]
        frames.append(SynthFrame(u[hit] * r[:, None], pose, cls[hit] == MOVING_CLASS, cls[hit], hit))
    return frames


def write_sequence(frames: list[SynthFrame], out_dir) -> Path:
    """Write ``velodyne/*.bin``, ``labels/*.label`` and ``poses.txt`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(frames):
        write_scan(f.points, out / "velodyne" / f"{k:06d}.bin")
        write_labels(f.classes, out / "labels" / f"{k:06d}.label")
    write_poses([f.pose for f in frames], out / "poses.txt")
    return out


def linear_path(frames: int, start=(0.0, 0.0, 1.8), velocity=(0.0, 0.0, 0.0), yaw: float = 0.0,
                yaw_rate: float = 0.0) -> list[Pose]:
    start, velocity = np.array(start, dtype=float), np.array(velocity, dtype=float)
    return [Pose.from_yaw(yaw + k * yaw_rate, start + k * velocity) for k in range(frames)]


def demo_scene(frames: int = 50, fov_width: float = 2 * math.pi, fov_center: float = 0.0,
               n_az: int = 1024, n_el: int = 64, noise: float = 0.0, seed: int = 0) -> SceneScript:
    """Walled yard with a few static blocks and one box crossing in front of the sensor at 0.5 m/frame."""
    sensor = SensorModel(n_az=n_az, n_el=n_el, fov_center=fov_center, fov_width=fov_width, noise=noise)
    walls = [
        Box((28.0, -30.0, 0.0), (28.6, 30.0, 5.0)),
        Box((-28.6, -30.0, 0.0), (-28.0, 30.0, 5.0)),
        Box((-28.0, 28.0, 0.0), (28.0, 28.6, 5.0)),
        Box((-28.0, -28.6, 0.0), (28.0, -28.0, 5.0)),
    ]
    blocks = [
        Box((14.0, 8.0, 0.0), (17.0, 11.0, 3.0)),
        Box((-14.0, -15.0, 0.0), (-10.0, -13.0, 2.5)),
        Box((4.8, -17.2, 0.0), (5.2, -16.8, 4.0)),
        Box((-9.0, 6.0, 0.0), (-6.0, 14.0, 1.5)),
        # hides the mover's first position so it is not baked into the bootstrap map
        Box((5.0, -12.0, 0.0), (7.0, -8.0, 3.0)),
    ]
    mover = MovingBox(size=(0.45, 0.45, 1.5), center=(9.0, -13.0, 1.65), velocity=(0.0, 0.5, 0.0))
    return SceneScript(
        frames=frames,
        sensor=sensor,
        poses=linear_path(frames, start=(0.0, 0.0, 1.8), velocity=(0.1, 0.0, 0.0)),
        ground=Ground(z=0.1, xmin=-28.0, xmax=28.0, ymin=-28.0, ymax=28.0),
        boxes=walls + blocks,
        movers=[mover],
        seed=seed,
    )


# --- text script format -------------------------------------------------------

_SECTION_KEYS = {
    "sensor": {"n_az", "n_el", "beta_min", "beta_max", "max_range", "fov_center", "fov_width", "noise"},
    "path": {"x", "y", "z", "vx", "vy", "vz", "yaw", "yaw_rate"},
    "ground": {"z", "xmin", "xmax", "ymin", "ymax"},
    "box": {"xmin", "xmax", "ymin", "ymax", "zmin", "zmax"},
    "mover": {"sx", "sy", "sz", "x", "y", "z", "vx", "vy", "vz", "start", "count"},
}


class ScriptError(ValueError):
    pass


def parse_script(text: str, source: str = "<script>") -> SceneScript:
    """Parse the line-oriented scene format.

    Each non-comment line is ``frames N``, ``seed N`` or a section word
    (sensor, path, ground, box, mover) followed by ``key=value`` pairs.
    Angles are radians.
    """
    frames, seed = None, 0
    sensor_kw, path_kw, ground = {}, {}, None
    boxes, movers = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *rest = line.split()
        where = f"{source}:{lineno}"
        try:
            if word in ("frames", "seed"):
                if len(rest) != 1:
                    raise ScriptError(f"{where}: '{word}' takes one integer")
                if word == "frames":
                    frames = int(rest[0])
                else:
                    seed = int(rest[0])
                continue
            if word not in _SECTION_KEYS:
                raise ScriptError(f"{where}: unknown directive '{word}'")
            kw = {}
            for item in rest:
                key, sep, val = item.partition("=")
                if not sep:
                    raise ScriptError(f"{where}: expected key=value, got '{item}'")
                if key not in _SECTION_KEYS[word]:
                    raise ScriptError(f"{where}: unknown key '{key}' for {word}")
                kw[key] = float(val)
            if word == "sensor":
                sensor_kw.update(kw)
            elif word == "path":
                path_kw.update(kw)
            elif word == "ground":
                ground = Ground(**kw)
            elif word == "box":
                boxes.append(Box((kw["xmin"], kw["ymin"], kw["zmin"]), (kw["xmax"], kw["ymax"], kw["zmax"])))
            else:
                count = kw.get("count")
                movers.append(MovingBox(
                    size=(kw["sx"], kw["sy"], kw["sz"]),
                    center=(kw["x"], kw["y"], kw["z"]),
                    velocity=(kw.get("vx", 0.0), kw.get("vy", 0.0), kw.get("vz", 0.0)),
                    start=int(kw.get("start", 0)),
                    count=None if count is None else int(count),
                ))
        except ScriptError:
            raise
        except KeyError as exc:
            raise ScriptError(f"{where}: missing key {exc}") from None
        except (ValueError, TypeError) as exc:
            raise ScriptError(f"{where}: {exc}") from None
    if frames is None or frames < 0:
        raise ScriptError(f"{source}: missing or negative 'frames'")
    for k in ("n_az", "n_el"):
        if k in sensor_kw:
            sensor_kw[k] = int(sensor_kw[k])
    try:
        sensor = SensorModel(**sensor_kw)
    except ValueError as exc:
        raise ScriptError(f"{source}: {exc}") from None
    poses = linear_path(
        frames,
        start=(path_kw.get("x", 0.0), path_kw.get("y", 0.0), path_kw.get("z", 0.0)),
        velocity=(path_kw.get("vx", 0.0), path_kw.get("vy", 0.0), path_kw.get("vz", 0.0)),
        yaw=path_kw.get("yaw", 0.0),
        yaw_rate=path_kw.get("yaw_rate", 0.0),
    )
    return SceneScript(frames, sensor, poses, ground, boxes, movers, seed)


def load_script(path) -> SceneScript:
    path = Path(path)
    return parse_script(path.read_text(), str(path))


def bundled_script_path() -> Path:
    return Path(__file__).parent / "data" / "demo_scene.txt"

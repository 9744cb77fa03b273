"""KITTI / SemanticKITTI style sequence reading and label / point-cloud writing.

On-disk formats:

* scans ``<frame:06d>.bin``: float32 little-endian records ``x y z intensity``
* poses: one row-major 3x4 matrix per text line
* calib: a ``Tr:`` line with 12 floats (LiDAR to camera)
* labels ``<frame:06d>.label``: uint32 little-endian, low 16 bits = class id
* predictions ``<frame:06d>.pred``: one byte per point, 0 static / 1 dynamic
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from raycull.core import Pose

log = logging.getLogger(__name__)

MOVING_CLASSES = frozenset(range(252, 260))


class FormatError(ValueError):
    """A file does not follow its expected layout."""


class ConsistencyError(ValueError):
    """Two inputs that must agree in size do not."""


def read_scan(path) -> np.ndarray:
    """Points (N, 3) float64 from a KITTI ``.bin``; non-finite records are dropped."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 ({len(raw) % 16} residual bytes)")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    pts = rec[:, :3].astype(np.float64)
    return pts[np.all(np.isfinite(pts), axis=1)]


def write_scan(points: np.ndarray, path, intensity: np.ndarray | None = None) -> None:
    points = np.asarray(points).reshape(-1, 3)
    rec = np.zeros((len(points), 4), dtype="<f4")
    rec[:, :3] = points
    if intensity is not None:
        rec[:, 3] = intensity
    Path(path).write_bytes(rec.tobytes())


def _nearest_rotation(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    Q = u @ vt
    if np.linalg.det(Q) < 0:
        u[:, -1] *= -1
        Q = u @ vt
    return Q


def _pose_from_row(vals: np.ndarray, where: str) -> Pose:
    T = vals.reshape(3, 4)
    R = T[:, :3]
    # text poses carry ~7 significant digits; snap tiny drift back onto SO(3)
    if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-3:
        raise FormatError(f"{where}: rotation block is not orthonormal")
    return Pose(_nearest_rotation(R), T[:, 3])


def read_calib(path) -> np.ndarray:
    """The 4x4 ``Tr`` matrix (LiDAR to camera) from a KITTI calib file."""
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if line.startswith("Tr:"):
            vals = line[3:].split()
            if len(vals) != 12:
                raise FormatError(f"{path}:{lineno}: Tr needs 12 values, got {len(vals)}")
            T = np.eye(4)
            T[:3, :] = np.array(vals, dtype=np.float64).reshape(3, 4)
            return T
    raise FormatError(f"{path}: no 'Tr:' line")


def read_poses(path, calib=None) -> list[Pose]:
    """Sensor-to-world poses, one per line.

    With ``calib`` (a path or a 4x4 ``Tr``) each camera-frame pose ``P`` is
    conjugated to ``Tr^-1 P Tr`` so the result is expressed in the LiDAR frame.
    """
    path = Path(path)
    Tr = None
    if calib is not None:
        Tr = read_calib(calib) if isinstance(calib, (str, Path)) else np.asarray(calib, dtype=np.float64)
        Tr_inv = np.linalg.inv(Tr)
    poses = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 12:
            raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(tok)}")
        try:
            vals = np.array(tok, dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if Tr is not None:
            P = np.eye(4)
            P[:3, :] = vals.reshape(3, 4)
            vals = (Tr_inv @ P @ Tr)[:3, :].ravel()
        poses.append(_pose_from_row(vals, f"{path}:{lineno}"))
    return poses


def write_poses(poses: list[Pose], path) -> None:
    lines = []
    for p in poses:
        T = p.matrix()[:3, :].ravel()
        lines.append(" ".join(f"{v:.9e}" for v in T))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass
class GroundTruthLabels:
    classes: np.ndarray
    moving: np.ndarray

    def __len__(self) -> int:
        return len(self.classes)


def read_labels(path, n_points: int | None = None, moving_classes=MOVING_CLASSES) -> GroundTruthLabels:
    """Semantic class ids (low 16 bits) and moving flags from a ``.label`` file."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 4")
    classes = (np.frombuffer(raw, dtype="<u4") & 0xFFFF).astype(np.uint16)
    if n_points is not None and len(classes) != n_points:
        raise ConsistencyError(f"{path}: {len(classes)} labels for {n_points} points")
    moving = np.isin(classes, np.fromiter(moving_classes, dtype=np.uint16))
    return GroundTruthLabels(classes, moving)


def write_labels(classes: np.ndarray, path) -> None:
    Path(path).write_bytes(np.asarray(classes, dtype="<u4").tobytes())


def write_pred(dynamic: np.ndarray, path) -> None:
    Path(path).write_bytes(np.asarray(dynamic, dtype=bool).astype(np.uint8).tobytes())


def read_pred(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(bool)


def write_point_cloud(points: np.ndarray, path, labels: np.ndarray | None = None) -> None:
    """ASCII PLY with ``x y z`` and an optional ``uchar label`` per vertex, in input order."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
              "property float x", "property float y", "property float z"]
    if labels is not None:
        labels = np.asarray(labels).astype(np.uint8)
        if len(labels) != len(points):
            raise ConsistencyError("label count differs from point count")
        header.append("property uchar label")
    header.append("end_header")
    pts32 = points.astype(np.float32)
    if labels is None:
        body = [f"{x!r} {y!r} {z!r}" for x, y, z in pts32.tolist()]
    else:
        body = [f"{x!r} {y!r} {z!r} {int(l)}" for (x, y, z), l in zip(pts32.tolist(), labels.tolist())]
    path = Path(path)
    try:
        path.write_text("\n".join(header + body) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def read_point_cloud(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read back an ASCII PLY written by :func:`write_point_cloud`."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n = None
    has_label = False
    end = None
    for k, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        elif line == "property uchar label":
            has_label = True
        elif line == "end_header":
            end = k
            break
    if n is None or end is None:
        raise FormatError(f"{path}: incomplete PLY header")
    rows = [r.split() for r in lines[end + 1:end + 1 + n]]
    if len(rows) != n:
        raise FormatError(f"{path}: expected {n} vertices, found {len(rows)}")
    data = np.array(rows, dtype=np.float64).reshape(n, 4 if has_label else 3)
    labels = data[:, 3].astype(np.uint8) if has_label else None
    return data[:, :3], labels


@dataclass
class SequenceSource:
    """A sequence on disk plus the inclusive frame range to process.

    Frames are numbered by position in the lexicographically sorted scan list,
    which must match the pose file line for line.
    """

    scan_dir: Path
    pose_file: Path
    calib_file: Path | None = None
    label_dir: Path | None = None
    frame_range: tuple[int, int] | None = None

    def __post_init__(self):
        self.scan_dir = Path(self.scan_dir)
        self.pose_file = Path(self.pose_file)
        self.calib_file = None if self.calib_file is None else Path(self.calib_file)
        self.label_dir = None if self.label_dir is None else Path(self.label_dir)
        for p in (self.scan_dir, self.pose_file, self.calib_file, self.label_dir):
            if p is not None and not p.exists():
                raise FileNotFoundError(f"no such file or directory: {p}")
        self._scans = sorted(self.scan_dir.glob("*.bin"))
        self._poses = None

    @property
    def scan_files(self) -> list[Path]:
        return list(self._scans)

    @property
    def poses(self) -> list[Pose]:
        if self._poses is None:
            self._poses = read_poses(self.pose_file, self.calib_file)
            if len(self._poses) != len(self._scans):
                raise ConsistencyError(
                    f"{len(self._scans)} scans in {self.scan_dir} but {len(self._poses)} poses in {self.pose_file}"
                )
        return self._poses

    def frames(self) -> list[int]:
        n = len(self._scans)
        if self.frame_range is None:
            return list(range(n))
        a, b = self.frame_range
        if a > b:
            raise ValueError(f"empty frame range {a}:{b}")
        if a < 0 or b >= n:
            raise ValueError(f"frame range {a}:{b} outside available frames 0:{n - 1}")
        return list(range(a, b + 1))

    def frame_name(self, k: int) -> str:
        return self._scans[k].stem

    def load_points(self, k: int) -> np.ndarray:
        return read_scan(self._scans[k])

    def load_labels(self, k: int, n_points: int | None = None, moving_classes=MOVING_CLASSES) -> GroundTruthLabels:
        if self.label_dir is None:
            raise ValueError("sequence has no label directory")
        return read_labels(self.label_dir / f"{self.frame_name(k)}.label", n_points, moving_classes)

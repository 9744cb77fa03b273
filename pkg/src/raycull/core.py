"""Rigid poses, frame transforms and scans.

Points are plain float64 numpy arrays: a single point has shape (3,), a
cloud has shape (N, 3). Distances are meters, angles radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Pose:
    """Sensor-to-world rigid transform ``p_w = R @ p_s + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(R @ R.T - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        """Build from a 3x4 or 4x4 homogeneous matrix."""
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self * other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


def transform(pose: Pose, p: np.ndarray) -> np.ndarray:
    """Apply ``pose`` to a point (3,) or a cloud (N, 3)."""
    p = np.asarray(p, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def range_of(p: np.ndarray) -> np.ndarray | float:
    """Euclidean norm of a point, or per-row norms of a cloud."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return float(np.sqrt(p @ p))
    return np.sqrt(np.einsum("ij,ij->i", p, p))


@dataclass(frozen=True)
class Scan:
    """One LiDAR frame: sensor-frame points plus the sensor-to-world pose."""

    points: np.ndarray
    pose: Pose
    frame_id: int = 0

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def ranges(self) -> np.ndarray:
        return range_of(self.points)

    def world_points(self) -> np.ndarray:
        return transform(self.pose, self.points)

    def filtered(self, min_range: float, max_range: float) -> tuple["Scan", np.ndarray]:
        """Drop points outside ``[min_range, max_range]``; also return the kept mask."""
        r = self.ranges
        keep = (r >= min_range) & (r <= max_range) & (r > 0)
        return Scan(self.points[keep], self.pose, self.frame_id), keep

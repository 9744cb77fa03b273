"""Voxel-level preservation rate, rejection rate and F1 for a cleaned map."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from raycull.voxel_map import pack_keys, voxel_keys

MIXED_VOXEL_NOTE = "voxels holding both GT static and GT dynamic points count in both denominators"


@dataclass(frozen=True)
class EvalReport:
    preserved_static: int
    total_static: int
    remaining_dynamic: int
    total_dynamic: int
    voxel_size: float

    @property
    def pr(self) -> float:
        return self.preserved_static / self.total_static

    @property
    def rr(self) -> float:
        if self.total_dynamic == 0:
            return 1.0
        return 1.0 - self.remaining_dynamic / self.total_dynamic

    @property
    def f1(self) -> float:
        s = self.pr + self.rr
        return 0.0 if s == 0 else 2.0 * self.pr * self.rr / s

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(PR=self.pr, RR=self.rr, F1=self.f1, convention=MIXED_VOXEL_NOTE)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self, name: str = "raycull") -> str:
        head = f"{'Method':<16}{'PR [%]':>10}{'RR [%]':>10}{'F1 score':>10}"
        row = f"{name:<16}{100 * self.pr:>10.3f}{100 * self.rr:>10.3f}{self.f1:>10.3f}"
        return "\n".join([f"# {MIXED_VOXEL_NOTE}", head, row]) + "\n"


def _voxels(points, voxel_size: float) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.unique(pack_keys(voxel_keys(points, voxel_size)))


class VoxelEvaluator:
    """Streaming form of :func:`evaluate`: feed frames one at a time.

    Only unique voxel keys are retained, so whole sequences fit in memory.
    """

    def __init__(self, voxel_size: float = 0.2):
        self.voxel_size = voxel_size
        self._parts: dict[str, list[np.ndarray]] = {"static": [], "dynamic": [], "pred": []}

    def add(self, gt_static, gt_dynamic, pred_static) -> None:
        for name, pts in (("static", gt_static), ("dynamic", gt_dynamic), ("pred", pred_static)):
            self._parts[name].append(_voxels(pts, self.voxel_size))

    def add_frame(self, world_points: np.ndarray, gt_moving: np.ndarray, pred_dynamic: np.ndarray) -> None:
        """One frame of world points with GT moving flags and predicted dynamic flags."""
        self.add(world_points[~gt_moving], world_points[gt_moving], world_points[~pred_dynamic])

    def _merged(self, name: str) -> np.ndarray:
        parts = self._parts[name]
        return np.unique(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)

    def report(self) -> EvalReport:
        s, d, p = self._merged("static"), self._merged("dynamic"), self._merged("pred")
        if len(s) == 0:
            raise ValueError("ground truth has no static voxels; PR is undefined")
        return EvalReport(
            preserved_static=int(np.isin(s, p, assume_unique=True).sum()),
            total_static=len(s),
            remaining_dynamic=int(np.isin(d, p, assume_unique=True).sum()),
            total_dynamic=len(d),
            voxel_size=self.voxel_size,
        )


def evaluate(pred_static, gt_static, gt_dynamic, voxel_size: float = 0.2) -> EvalReport:
    """Compare predicted static points against ground-truth static/dynamic points.

    A GT voxel counts as kept when at least one predicted static point falls
    inside it. Point order is irrelevant.
    """
    ev = VoxelEvaluator(voxel_size)
    ev.add(gt_static, gt_dynamic, pred_static)
    return ev.report()

"""Shared hand-built data."""

import numpy as np


def fourteen_voxel_fixture(v=0.2):
    """10 GT-static voxels and 4 GT-dynamic voxels; the prediction keeps 9 static and 1 dynamic."""
    centers = (np.arange(14)[:, None] * np.array([1.0, 0.0, 0.0]) + 0.5) * v
    gt_static, gt_dynamic = centers[:10], centers[10:]
    pred = np.vstack([gt_static[:9], gt_dynamic[:1]])
    return pred, gt_static, gt_dynamic

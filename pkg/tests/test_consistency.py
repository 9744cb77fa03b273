import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from raycull.azel import GridSpec, build_grid
from raycull.consistency import (
    RAY_TEST, REVERTED, ConsistencyParams, LabelSet, classify_bin, classify_frame, collect_no_return,
    map_reference, map_references,
)
from raycull.core import Pose, Scan
from raycull.voxel_map import VoxelMap

P = ConsistencyParams()


def _grid_with_cast(cast):
    cast = np.asarray(cast, dtype=np.float64)
    g = build_grid(Scan(np.array([[1.0, 0, 0]]), Pose.identity()), None, VoxelMap(0.2),
                   GridSpec(cast.shape[0], cast.shape[1], -0.5, 0.5))
    g.cast[:] = cast
    return g


def test_map_reference_singleton():
    cast = np.full((3, 3), np.inf)
    cast[0, 2] = 4.0
    g = _grid_with_cast(cast)
    for q in (0.1, 0.5, 0.9):
        assert map_reference(g, 1, 1, ConsistencyParams(q=q)) == 4.0


def test_map_reference_nearest_rank():
    cast = np.full((5, 5), np.inf)
    cast[1:4, 1:4] = np.arange(1, 10).reshape(3, 3)
    cast[0, 0] = 10.0  # outside the r_n=1 window
    g = _grid_with_cast(cast)
    assert map_reference(g, 2, 2, ConsistencyParams(q=0.9)) == 9.0
    g.cast[3, 3] = 10.0
    g.cast[3, 2] = np.inf
    g.cast[1, 1] = 1.0
    vals = sorted(v for v in g.cast[1:4, 1:4].ravel() if np.isfinite(v))
    assert map_reference(g, 2, 2, ConsistencyParams(q=0.5)) == vals[math.ceil(0.5 * len(vals)) - 1]


def test_map_reference_ten_values():
    cast = np.full((5, 5), np.inf)
    cast[:, 2] = [1, 2, 3, 4, 5]
    cast[:, 3] = [6, 7, 8, 9, 10]
    g = _grid_with_cast(cast)
    assert map_reference(g, 2, 2, ConsistencyParams(r_n=2, q=0.9)) == 9.0


def test_map_reference_no_hits():
    g = _grid_with_cast(np.full((3, 3), np.inf))
    assert map_reference(g, 1, 1, P) is None
    assert np.isnan(map_references(g, np.array([1]), np.array([1]), P)[0])


def test_map_reference_window_clipped_at_edges():
    cast = np.full((4, 4), np.inf)
    cast[0, 0], cast[1, 1], cast[3, 3] = 2.0, 3.0, 100.0
    g = _grid_with_cast(cast)
    assert map_reference(g, 0, 0, ConsistencyParams(q=0.9)) == 3.0


def test_classify_bin_examples():
    assert classify_bin(3.0, 5.0, P) is True
    assert classify_bin(4.9, 5.0, P) is False
    assert classify_bin(6.0, 5.0, P) is False


@settings(max_examples=200, deadline=None)
@given(st.floats(0.1, 100), st.floats(0.1, 100), st.floats(0, 50))
def test_classify_bin_monotone(d_map, d_scan, shrink):
    if classify_bin(d_scan, d_map, P):
        assert classify_bin(max(d_scan - shrink, 0.0), d_map, P)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.1, 100), st.floats(0.1, 100), st.floats(0, 2))
def test_classify_bin_scale_without_slope(d_map, d_scan, tau0):
    a = classify_bin(d_scan, d_map, ConsistencyParams(tau0=tau0, tau1=0.0))
    b = classify_bin(2 * d_scan, 2 * d_map, ConsistencyParams(tau0=2 * tau0, tau1=0.0))
    assert a == b


def _wall_map(x=10.0, half=6.0):
    m = VoxelMap(0.2)
    ys, zs = np.meshgrid(np.arange(-half, half, 0.1), np.arange(-3, 3, 0.1))
    m.insert_points(np.column_stack([np.full(ys.size, x), ys.ravel(), zs.ravel()]))
    return m


def _wall_scan(x=10.0, half=3.0, step=0.05):
    ys, zs = np.meshgrid(np.arange(-half, half, step), np.arange(-1.5, 1.5, step))
    return np.column_stack([np.full(ys.size, x), ys.ravel(), zs.ravel()])


SPEC = GridSpec(720, 200, math.radians(-25), math.radians(25))


def test_classify_frame_identical_scene_static():
    g = build_grid(Scan(_wall_scan(10.05), Pose.identity()), None, _wall_map(), SPEC, window=1)
    lab = classify_frame(g, P)
    assert not lab.dynamic.any()
    assert (lab.stage == RAY_TEST).all()


def test_classify_frame_box_in_front_of_wall():
    wall = _wall_scan(10.05)
    box = _wall_scan(2.0, half=0.3, step=0.02)
    box = box[np.abs(box[:, 2]) < 0.3]
    pts = np.vstack([wall, box])
    g = build_grid(Scan(pts, Pose.identity()), None, _wall_map(), SPEC, window=1)
    lab = classify_frame(g, P)
    assert lab.dynamic[len(wall):].all()
    # wall points behind the box share bins with it; elsewhere the wall stays static
    box_bins = {(g.point_i[k], g.point_j[k]) for k in range(len(wall), len(pts))}
    free_wall = [k for k in range(len(wall)) if (g.point_i[k], g.point_j[k]) not in box_bins]
    assert not lab.dynamic[free_wall].any()


def test_box_near_wall_within_range_slack_stays_static():
    # 2 m gap at 8 m is inside tau0 + tau1 * 8 = 3.1 m
    pts = _wall_scan(8.0, half=0.5, step=0.05)
    g = build_grid(Scan(pts, Pose.identity()), None, _wall_map(), SPEC, window=1)
    assert not classify_frame(g, P).dynamic.any()


def test_classify_frame_empty_map_all_static():
    g = build_grid(Scan(_wall_scan(), Pose.identity()), None, VoxelMap(0.2), SPEC, window=1)
    assert not classify_frame(g, P).dynamic.any()


def test_no_dynamic_without_window_hits(rng):
    m = VoxelMap(0.2)
    m.insert_keys(rng.integers(-30, 30, size=(400, 3)))
    pts = rng.normal(size=(4000, 3)) * 5
    g = build_grid(Scan(pts, Pose.identity()), None, m, GridSpec(180, 60), window=1)
    lab = classify_frame(g, P)
    ref = map_references(g, g.point_i[g.in_fov], g.point_j[g.in_fov], P)
    assert not lab.dynamic[g.in_fov][np.isnan(ref)].any()


def test_label_revert_only_dynamic():
    lab = LabelSet.all_static(4)
    lab.dynamic[[1, 2]] = True
    lab.revert(np.array([0, 1]))
    assert lab.dynamic.tolist() == [False, False, True, False]
    assert lab.stage.tolist() == [RAY_TEST, REVERTED, RAY_TEST, RAY_TEST]
    assert lab.as_bytes() == b"\x00\x00\x01\x00"


def _one_voxel_grid(scan_pts):
    m = VoxelMap(0.2)
    m.insert_points(np.array([[5.1, 0.1, 0.1]]))
    spec = GridSpec(1, 1, -0.05, 0.05, 60.0)  # lone bin looking down +x
    g = build_grid(Scan(scan_pts, Pose.identity()), None, m, spec, no_return=True)
    return g, m


def test_collect_no_return_hit():
    g, m = _one_voxel_grid(np.array([[5.05, 0.0, 0.0]]))
    assert collect_no_return(g, m, Pose.identity()) == (0, 1)
    assert m.hit_count((25, 0, 0)) == 1 and m.miss_count((25, 0, 0)) == 0


def test_collect_no_return_miss():
    m = VoxelMap(0.2)
    m.insert_points(np.array([[5.1, 0.1, 0.1]]))
    spec = GridSpec(3, 3, -0.3, 0.3, 60.0)  # columns centered at -2pi/3, 0, 2pi/3; rows at -0.2, 0, 0.2
    # returns in bins (1, 0) and (0, 1) make bin (1, 1), aimed at the wall voxel, in-FoV but empty
    pts = np.array([[3 * math.cos(0.2), 0.0, -3 * math.sin(0.2)], [-1.5, -2.6, 0.0]])
    g = build_grid(Scan(pts, Pose.identity()), None, m, spec, no_return=True)
    assert g.cast_mask[1, 1] and math.isfinite(g.cast[1, 1])
    assert collect_no_return(g, m, Pose.identity()) == (1, 0)
    assert m.miss_count((25, 0, 0)) == 1
    assert m.hit_count((25, 0, 0)) == 0


def test_collect_no_return_no_cast_hit():
    g, m = _one_voxel_grid(np.array([[5.05, 0.0, 0.0]]))
    g.cast[:] = np.inf
    assert collect_no_return(g, m, Pose.identity()) == (0, 0)
    assert m.miss_count((25, 0, 0)) == 0 and m.hit_count((25, 0, 0)) == 0

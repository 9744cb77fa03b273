import math

import numpy as np
import pytest

from raycull.azel import GridSpec, bin_direction_world, bin_of, bin_points, build_grid, cast_ray, cast_rays
from raycull.core import Pose, Scan
from raycull.voxel_map import VoxelMap

SPEC = GridSpec(720, 450, math.radians(-25), math.radians(3), 60.0)


def test_bin_of_forward_axis():
    i, j = bin_of(SPEC, (1.0, 0.0, 0.0))
    assert i == 360
    assert j == math.floor((0 - SPEC.beta_min) / SPEC.d_beta)


def test_bin_of_left_axis():
    i, j = bin_of(SPEC, (0.0, 1.0, 0.0))
    assert i == math.floor((math.pi / 2 + math.pi) / SPEC.d_alpha)
    assert j == bin_of(SPEC, (1.0, 0.0, 0.0))[1]


def test_bin_of_pole_out_of_fov():
    assert bin_of(SPEC, (0.0, 0.0, 1.0)) is None


def test_bin_of_negative_x_axis_wraps_to_last_column():
    # arctan2(+0, -1) = pi; arctan2(-0, -1) = -pi is folded onto pi
    assert bin_of(SPEC, (-1.0, 0.0, 0.0))[0] == SPEC.n_az - 1
    assert bin_of(SPEC, (-1.0, -0.0, 0.0))[0] == SPEC.n_az - 1


def test_bin_points_total_over_fov(rng):
    a = rng.uniform(-math.pi, math.pi, 5000)
    b = rng.uniform(SPEC.beta_min, SPEC.beta_max, 5000)
    pts = np.stack([np.cos(a) * np.cos(b), np.sin(a) * np.cos(b), np.sin(b)], axis=1) * rng.uniform(1, 50, (5000, 1))
    i, j = bin_points(SPEC, pts)
    assert ((i >= 0) & (i < SPEC.n_az) & (j >= 0) & (j < SPEC.n_el)).all()


def test_zero_range_rejected():
    with pytest.raises(ValueError):
        bin_of(SPEC, (0.0, 0.0, 0.0))


def test_bin_direction_examples():
    for i, j in ((0, 0), (100, 17), (719, 449)):
        assert np.linalg.norm(bin_direction_world(SPEC, Pose.from_yaw(1.0), i, j)) == pytest.approx(1.0, abs=1e-9)
    spec = GridSpec(2, 1, -0.1, 0.1, 60.0)  # single row centered at beta 0; columns at -pi/2 and pi/2
    assert np.allclose(bin_direction_world(spec, Pose.identity(), 1, 0), [0, 1, 0], atol=1e-12)
    spec = GridSpec(1, 1, -0.1, 0.1, 60.0)  # lone bin centered at alpha 0, beta 0
    assert np.allclose(bin_direction_world(spec, Pose.identity(), 0, 0), [1, 0, 0], atol=1e-12)
    assert np.allclose(bin_direction_world(spec, Pose.from_yaw(math.pi / 2), 0, 0), [0, 1, 0], atol=1e-9)


def _wall_voxel():
    m = VoxelMap(0.2)
    m.insert_points(np.array([[5.0, 0.0, 0.0]]))
    assert (25, 0, 0) in m
    return m


def test_cast_ray_examples():
    m = _wall_voxel()
    assert cast_ray(m, (0, 0, 0), (1, 0, 0), 60.0) == pytest.approx(5.0, abs=1e-9)
    assert cast_ray(VoxelMap(0.2), (0, 0, 0), (1, 0, 0), 60.0) == math.inf
    far = VoxelMap(0.2)
    far.insert_points(np.array([[70.1, 0.1, 0.1]]))
    assert cast_ray(far, (0, 0.1, 0.1), (1, 0, 0), 60.0) == math.inf
    assert cast_ray(far, (0, 0.1, 0.1), (1, 0, 0), 80.0) == pytest.approx(70.0, abs=1e-9)


def test_cast_ray_origin_voxel_occupied():
    m = _wall_voxel()
    assert cast_ray(m, (5.1, 0.1, 0.1), (1, 0, 0), 60.0) == pytest.approx(1e-6)


def test_cast_ray_negative_direction():
    m = VoxelMap(0.2)
    m.insert_points(np.array([[-3.1, 0.1, 0.1]]))  # voxel spans x in [-3.2, -3.0)
    assert cast_ray(m, (0, 0.1, 0.1), (-1, 0, 0), 60.0) == pytest.approx(3.0, abs=1e-9)


def test_cast_ray_rejects_non_unit():
    with pytest.raises(ValueError):
        cast_ray(VoxelMap(0.2), (0, 0, 0), (2, 0, 0), 60.0)


def test_cast_never_between_rmax_and_inf(rng):
    m = VoxelMap(0.2)
    m.insert_keys(rng.integers(-40, 40, size=(3000, 3)))
    d = rng.normal(size=(2000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = cast_rays(m, np.array([0.05, 0.05, 0.05]), d, 4.0)
    assert np.all((r <= 4.0) | np.isinf(r))
    assert np.array_equal(r, cast_rays(m, np.array([0.05, 0.05, 0.05]), d, 4.0))


def test_build_grid_single_point_empty_map():
    scan = Scan(np.array([[10.0, 0.0, 0.0]]), Pose.identity())
    g = build_grid(scan, None, VoxelMap(0.2), SPEC)
    i, j = bin_of(SPEC, (10.0, 0.0, 0.0))
    assert g.scan_min[i, j] == 10.0
    assert g.cast[i, j] == math.inf
    assert g.cast_mask[i, j]
    assert g.cast_mask.sum() == 1


def test_build_grid_min_range_and_wall():
    pts = np.array([[5.0, 0.0, 0.0], [7.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    g = build_grid(Scan(pts[:2], Pose.identity()), None, VoxelMap(0.2), SPEC)
    i, j = bin_of(SPEC, (1.0, 0.0, 0.0))
    assert g.scan_min[i, j] == 5.0
    assert sorted(g.members(i, j).tolist()) == [0, 1]

    wall = VoxelMap(0.2)
    # the bin-center ray deviates from the x axis by under half a bin; a 3x3 voxel patch catches it
    ys, zs = np.meshgrid([-0.1, 0.1, 0.3], [-0.1, 0.1, 0.3])
    wall.insert_points(np.column_stack([np.full(9, 5.1), ys.ravel(), zs.ravel()]))
    g = build_grid(Scan(pts[2:], Pose.identity()), None, wall, SPEC)
    assert g.scan_min[i, j] == 3.0
    assert g.cast[i, j] == pytest.approx(5.0, abs=1e-3)


def test_build_grid_window_casts_neighbours():
    scan = Scan(np.array([[10.0, 0.0, 0.0]]), Pose.identity())
    g = build_grid(scan, None, VoxelMap(0.2), SPEC, window=1)
    assert g.cast_mask.sum() == 9


def test_build_grid_deterministic(rng):
    m = VoxelMap(0.2)
    m.insert_keys(rng.integers(-50, 50, size=(5000, 3)))
    pts = rng.normal(size=(3000, 3)) * 8
    spec = GridSpec(360, 64, r_max=30.0)
    pose = Pose.from_yaw(0.4, (0.3, -0.2, 0.1))
    a = build_grid(Scan(pts, pose), None, m, spec, window=1)
    b = build_grid(Scan(pts, pose), None, m, spec, window=1)
    assert a.cast.tobytes() == b.cast.tobytes()
    assert a.scan_min.tobytes() == b.scan_min.tobytes()


def test_auto_elevation_range_covers_scan(rng):
    pts = rng.normal(size=(1000, 3))
    spec = GridSpec(720, 64).resolve(pts)
    i, _ = bin_points(spec, pts)
    assert (i >= 0).all()


def test_dump_cast_csv(tmp_path):
    g = build_grid(Scan(np.array([[3.0, 0, 0]]), Pose.identity()), None, _wall_voxel(), GridSpec(1, 1, -0.1, 0.1))
    g.dump_cast_csv(tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text() == "i,j,r_cast\n0,0,5.0\n"

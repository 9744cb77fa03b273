import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raycull.consistency import RAY_TEST, REVERTED, VALIDATED, LabelSet
from raycull.validation import (
    Cluster, Group, ValidationParams, cluster_dynamic, group_coverage, merge_groups, reclassify_group,
    residual_cleanup, screen_clusters, validate,
)
from raycull.voxel_map import VoxelMap

P = ValidationParams()


def _at_range(offsets, r=5.0):
    return np.array([[r, 0.0, 0.0]]) + np.asarray(offsets, dtype=np.float64)


def test_cluster_examples():
    assert len(cluster_dynamic(_at_range([[0, 0, 0], [0, 0.1, 0]]), P)) == 1
    assert len(cluster_dynamic(_at_range([[0, 0, 0], [0, 2.0, 0]]), P)) == 2
    assert cluster_dynamic(np.empty((0, 3)), P) == []


def test_cluster_threshold_uses_nearer_range():
    # threshold 0.3 + 0.02 * min(10, 10.39) = 0.5
    pts = np.array([[10.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    pts[1, 1] = 0.49
    assert len(cluster_dynamic(pts, P, ranges=np.array([10.0, 50.0]))) == 1
    pts[1, 1] = 0.51
    assert len(cluster_dynamic(pts, P, ranges=np.array([10.0, 50.0]))) == 2


def test_cluster_order_by_smallest_member():
    pts = _at_range([[0, 5, 0], [0, 0, 0], [0, 5.1, 0], [0, 0.1, 0]])
    cl = cluster_dynamic(pts, P)
    assert [c.members.tolist() for c in cl] == [[0, 2], [1, 3]]


def _cluster(n, r, diam):
    ext = np.array([diam / math.sqrt(2), diam / math.sqrt(2), 1.0])
    return Cluster(np.arange(n), r, ext)


def test_screen_examples():
    assert P.min_size(10.0) == 20
    kept, rejected = screen_clusters([_cluster(3, 10.0, 1.0)], P)
    assert kept == [] and len(rejected) == 1
    params = ValidationParams(d_min=0.3)
    assert params.min_width(10.0) == pytest.approx(0.3)
    kept, rejected = screen_clusters([_cluster(500, 10.0, 2.0)], params)
    assert len(kept) == 1 and rejected == []
    assert screen_clusters([], P) == ([], [])


def test_screen_width_rule():
    kept, rejected = screen_clusters([_cluster(500, 10.0, 0.1)], ValidationParams(d_min=0.3))
    assert kept == [] and len(rejected) == 1


def _voxel_cluster(points, idx):
    idx = np.asarray(idx)
    return Cluster(idx, 5.0, points[idx].max(axis=0) - points[idx].min(axis=0))


def test_merge_examples():
    pts = np.array([[0.1, 0.1, 0.1], [0.3, 0.1, 0.1], [2.1, 0.1, 0.1], [0.5, 0.3, 0.1]])
    a, b, c, d = (_voxel_cluster(pts, [k]) for k in range(4))
    assert len(merge_groups([a, b], pts, 0.2)) == 1
    assert len(merge_groups([a, c], pts, 0.2)) == 2
    # a-b and b-d touch, a-d do not: transitivity joins all three
    groups = merge_groups([a, b, d], pts, 0.2)
    assert len(groups) == 1 and groups[0].members.tolist() == [0, 1, 3]
    assert merge_groups([], pts, 0.2) == []


def _union_find_groups(points, clusters, v):
    keys = [set(map(tuple, np.floor(points[c.members] / v).astype(int).tolist())) for c in clusters]
    parent = list(range(len(clusters)))

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    for i in range(len(clusters)):
        for j in range(i + 1, len(clusters)):
            if any(max(abs(p - q) for p, q in zip(ka, kb)) <= 1 for ka in keys[i] for kb in keys[j]):
                parent[find(i)] = find(j)
    out = {}
    for i, c in enumerate(clusters):
        out.setdefault(find(i), []).extend(c.members.tolist())
    return sorted(sorted(g) for g in out.values())


def test_merge_matches_brute_force(rng):
    for _ in range(30):
        pts = rng.uniform(-1, 1, size=(60, 3))
        perm = rng.permutation(60)
        cuts = np.sort(rng.choice(np.arange(1, 60), size=9, replace=False))
        clusters = [_voxel_cluster(pts, np.sort(part)) for part in np.split(perm, cuts)]
        got = sorted(g.members.tolist() for g in merge_groups(clusters, pts, 0.2))
        assert got == _union_find_groups(pts, clusters, 0.2)


def _group(points):
    idx = np.arange(len(points))
    return Group([], idx, points.max(axis=0) - points.min(axis=0))


def test_reclassify_examples():
    m = VoxelMap(0.2)
    inside = np.array([[0.1, 0.1, 0.1], [0.15, 0.1, 0.1], [0.3, 0.3, 0.3]])
    m.insert_points(inside[:1])
    g = _group(inside)
    assert reclassify_group(g, inside, m, P) is True and g.coverage == 1.0
    far = inside + 10
    g = _group(far)
    assert reclassify_group(g, far, m, P) is False and g.coverage == 0.0


def test_reclassify_edge_rule():
    m = VoxelMap(0.2)
    m.insert_points(np.array([[0.1, 0.1, 0.1]]))
    # thin plate 0.1 m deep, half of it within one voxel of the map
    pts = np.array([[0.1, 0.1, 0.1], [0.1, 0.3, 0.1], [0.2, 2.0, 0.1], [0.2, 2.2, 0.1]])
    g = _group(pts)
    assert reclassify_group(g, pts, m, P) is True
    assert g.coverage == 0.5 and g.thin <= P.theta_thin
    thick = pts.copy()
    thick[2:, 2] += 1.0
    thick[2:, 0] += 1.0
    g = _group(thick)
    assert g.thin > P.theta_thin
    assert reclassify_group(g, thick, m, P) is False


def test_residual_examples():
    m = VoxelMap(0.2)
    assert residual_cleanup([], np.empty((0, 3)), m, P).size == 0
    small = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float) + 20
    assert residual_cleanup([_group(small)], small, m, P).tolist() == [0, 1, 2, 3]

    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(0, 3, 100), rng.uniform(0, 3, 100), rng.uniform(0, 1, 100)])
    pts[:30, 0] = rng.uniform(20.0, 20.1, 30)
    pts[:30, 1] = rng.uniform(0.0, 0.1, 30)
    pts[:30, 2] = 0.5
    m.insert_points(np.array([[20.05, 0.05, 0.5]]))
    covered = m.contains_dilated_many(pts, P.dilation)
    assert covered.sum() == 30
    assert residual_cleanup([_group(pts)], pts, m, P).tolist() == list(range(30))


def test_residual_narrow_remainder_reverts():
    m = VoxelMap(0.2)
    pts = np.array([[5.0, 5.0, z] for z in np.linspace(0, 2, 10)])
    assert len(residual_cleanup([_group(pts)], pts, m, P)) == 10


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_coverage_additive(na, nb, seed):
    rng = np.random.default_rng(seed)
    m = VoxelMap(0.2)
    m.insert_keys(rng.integers(-3, 3, size=(10, 3)))
    pts = rng.uniform(-1, 1, size=(na + nb, 3))
    ga, gb = Group([], np.arange(na), np.ones(3)), Group([], np.arange(na, na + nb), np.ones(3))
    gab = Group([], np.arange(na + nb), np.ones(3))
    ca, cb, cab = (group_coverage(g, pts, m, 1).mean() for g in (ga, gb, gab))
    assert 0.0 <= cab <= 1.0
    assert cab * (na + nb) == pytest.approx(ca * na + cb * nb)


def test_validate_only_moves_dynamic_to_static(rng):
    m = VoxelMap(0.2)
    m.insert_keys(rng.integers(-20, 20, size=(500, 3)))
    for _ in range(20):
        pts = rng.uniform(-4, 4, size=(400, 3))
        lab = LabelSet.all_static(len(pts))
        lab.dynamic[rng.random(len(pts)) < 0.5] = True
        before = lab.dynamic.copy()
        validate(lab, pts, np.linalg.norm(pts, axis=1) + 1, m, ValidationParams(size_coeff=50))
        assert len(lab) == len(pts)
        assert not (lab.dynamic & ~before).any()
        assert (lab.stage[lab.dynamic] == VALIDATED).all()
        assert (lab.stage[before & ~lab.dynamic] == REVERTED).all()
        assert (lab.stage[~before] == RAY_TEST).all()


def test_validate_keeps_free_object():
    m = VoxelMap(0.2)
    wall = np.array([[x, y, z] for x in (10.0,) for y in np.arange(-5, 5, 0.1) for z in np.arange(0, 2, 0.1)])
    m.insert_points(wall)
    box = np.array([[x, y, z] for x in np.arange(4, 4.5, 0.05) for y in np.arange(-0.5, 0.5, 0.05)
                    for z in np.arange(0.2, 1.7, 0.1)])
    lab = LabelSet.all_static(len(box))
    lab.dynamic[:] = True
    validate(lab, box, np.linalg.norm(box, axis=1), m, P)
    assert lab.dynamic.all()

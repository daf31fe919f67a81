from collections import defaultdict

import numpy as np
import pytest

from pointline.errors import PointlineError
from pointline.geometry import CameraIntrinsics, Se3Pose, se3_exp
from pointline.voma import (
    ArchivedKeyframe,
    DepthImage,
    OctreeMap,
    PointCloud,
    VolumetricMapper,
    backproject_depth_image,
    estimate_normals,
    export_csv,
    export_ply,
    extract_global_cloud,
    integrate_cloud,
    maps_equal,
    rebuild_on_adjustment,
)

K = CameraIntrinsics(60.0, 60.0, 32.0, 24.0)


def test_backproject_constant_depth_contains_principal_ray():
    img = DepthImage(np.full((48, 64), 2.0))
    cloud = backproject_depth_image(img, K, with_normals=False)
    assert len(cloud) == 48 * 64
    assert np.any(np.all(np.isclose(cloud.points, [0, 0, 2.0]), axis=1))


def test_backproject_skips_missing_and_counts():
    rng = np.random.default_rng(0)
    depths = np.full((40, 50), 3.0)
    dropout = rng.random(depths.shape) < 0.3
    depths[dropout] = np.nan
    cloud = backproject_depth_image(DepthImage(depths), K, with_normals=False)
    assert len(cloud) == int(np.isfinite(depths).sum())
    empty = backproject_depth_image(DepthImage(np.full((8, 8), np.nan)), K)
    assert len(empty) == 0


def test_normals_fronto_parallel_plane():
    img = DepthImage(np.full((20, 30), 2.0))
    normals = estimate_normals(img, K)
    inner = normals[1:-1, 1:-1]
    assert np.allclose(inner, [0, 0, -1], atol=1e-9)
    assert np.all(np.isnan(normals[0])) and np.all(np.isnan(normals[:, 0]))


def test_normals_slanted_plane_analytic():
    n = np.array([0.35, -0.1, -0.93])
    n /= np.linalg.norm(n)
    c = -1.5
    u, v = np.meshgrid(np.arange(30.0), np.arange(20.0))
    denom = n[0] * (u - K.cx) / K.fx + n[1] * (v - K.cy) / K.fy + n[2]
    img = DepthImage(c / denom)
    normals = estimate_normals(img, K)
    inner = normals[1:-1, 1:-1].reshape(-1, 3)
    angles = np.degrees(np.arccos(np.clip(inner @ n, -1, 1)))
    assert angles.max() < 0.5


def test_normals_isolated_pixel_missing():
    depths = np.full((9, 9), np.nan)
    depths[4, 4] = 2.0
    normals = estimate_normals(DepthImage(depths), K)
    assert np.all(np.isnan(normals[4, 4]))


def test_two_points_one_cell_centroid():
    tree = OctreeMap(0.01, max_extent=1.0)
    cloud = PointCloud(np.array([[0.001, 0, 0], [0.009, 0, 0]]))
    report = integrate_cloud(tree, cloud, Se3Pose.identity())
    assert report == {"new_cells": 1, "updated_cells": 0}
    cells = tree.cells()
    assert len(cells) == 1
    index, cell = cells[0]
    assert index == (0, 0, 0)
    assert np.allclose(cell.position_sum / cell.count, [0.005, 0, 0])


def test_double_integration_keeps_centroids():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.5, 0.5, size=(500, 3))
    tree = OctreeMap(0.05, max_extent=2.0)
    integrate_cloud(tree, PointCloud(pts), Se3Pose.identity())
    first = {tuple(i): c.position_sum / c.count for i, c in tree.cells()}
    integrate_cloud(tree, PointCloud(pts), Se3Pose.identity())
    for index, cell in tree.cells():
        assert cell.count % 2 == 0
        assert np.allclose(cell.position_sum / cell.count, first[tuple(index)], atol=1e-12)


def test_group_by_oracle_random_cloud():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(4000, 3))
    res = 0.07
    tree = OctreeMap(res, max_extent=4.0)
    integrate_cloud(tree, PointCloud(pts), Se3Pose.identity())
    groups = defaultdict(list)
    for p in pts:
        groups[tuple(np.floor(p / res).astype(int))].append(p)
    cells = {tuple(i): c for i, c in tree.cells()}
    assert set(cells) == set(groups)
    assert len(cells) <= len(pts)
    for key, members in groups.items():
        assert np.allclose(
            cells[key].position_sum / cells[key].count, np.mean(members, axis=0), atol=1e-12
        )


def test_half_open_boundary_convention():
    tree = OctreeMap(0.1, max_extent=1.0)
    cloud = PointCloud(np.array([[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0]]))
    integrate_cloud(tree, cloud, Se3Pose.identity())
    indices = {tuple(i) for i, _ in tree.cells()}
    assert (1, 0, 0) in indices  # 0.1 belongs to [0.1, 0.2)
    assert (-1, 0, 0) in indices  # -0.1 belongs to [-0.1, 0.0)


def test_centroids_inside_their_cells():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-2, 2, size=(2000, 3))
    res = 0.13
    tree = OctreeMap(res, max_extent=8.0)
    integrate_cloud(tree, PointCloud(pts), Se3Pose.identity())
    for index, cell in tree.cells():
        centroid = cell.position_sum / cell.count
        lo = np.array(index) * res
        assert np.all(centroid >= lo - 1e-12) and np.all(centroid < lo + res + 1e-12)


def test_integration_order_independence():
    rng = np.random.default_rng(4)
    clouds = [PointCloud(rng.uniform(-1, 1, size=(300, 3))) for _ in range(5)]
    poses = [se3_exp(rng.normal(size=6) * 0.1) for _ in range(5)]

    def build(order):
        tree = OctreeMap(0.05, max_extent=4.0)
        for i in order:
            integrate_cloud(tree, clouds[i], poses[i])
        return tree

    a = build([0, 1, 2, 3, 4])
    b = build([4, 2, 0, 3, 1])
    assert maps_equal(a, b, tol=1e-12)


def test_extraction_identity_and_purity():
    tree = OctreeMap(0.02, max_extent=1.0)
    point = np.array([0.123, -0.321, 0.044])
    normal = np.array([0.0, 0.0, -1.0])
    cloud = PointCloud(point[None, :], colors=np.array([[10, 20, 30]]), normals=normal[None, :])
    integrate_cloud(tree, cloud, Se3Pose.identity())
    key_before = tree.content_key()
    out = extract_global_cloud(tree)
    assert tree.content_key() == key_before
    assert np.allclose(out.points[0], point, atol=1e-15)
    assert np.array_equal(out.colors[0], [10, 20, 30])
    assert np.allclose(out.normals[0], normal)
    empty = extract_global_cloud(OctreeMap(0.02, max_extent=1.0))
    assert len(empty) == 0


def test_color_mean_rounds_half_up():
    tree = OctreeMap(0.1, max_extent=1.0)
    cloud = PointCloud(
        np.array([[0.01, 0, 0], [0.02, 0, 0]]), colors=np.array([[10, 0, 0], [11, 0, 0]])
    )
    integrate_cloud(tree, cloud, Se3Pose.identity())
    out = extract_global_cloud(tree)
    assert out.colors[0, 0] == 11  # mean 10.5 rounds half-up


def test_rebuild_no_change_is_identical():
    rng = np.random.default_rng(5)
    tree = OctreeMap(0.05, max_extent=4.0)
    archive = []
    for kf_id in range(4):
        cloud = PointCloud(rng.uniform(-1, 1, size=(200, 3)))
        pose = se3_exp(rng.normal(size=6) * 0.1)
        integrate_cloud(tree, cloud, pose)
        archive.append(ArchivedKeyframe(kf_id, cloud, pose))
    rebuilt = rebuild_on_adjustment(tree, archive)
    assert maps_equal(tree, rebuilt, tol=0.0)


def test_rebuild_missing_cloud_rejected():
    tree = OctreeMap(0.05, max_extent=4.0)
    with pytest.raises(PointlineError):
        rebuild_on_adjustment(tree, [ArchivedKeyframe(0, None, Se3Pose.identity())])


def test_rebuild_equals_fresh_after_rigid_motion():
    rng = np.random.default_rng(6)
    clouds = [PointCloud(rng.uniform(-1, 1, size=(250, 3))) for _ in range(3)]
    poses = [se3_exp(rng.normal(size=6) * 0.1) for _ in range(3)]
    tree = OctreeMap(0.05, max_extent=8.0)
    archive = []
    for i, (cloud, pose) in enumerate(zip(clouds, poses)):
        integrate_cloud(tree, cloud, pose)
        archive.append(ArchivedKeyframe(i, cloud, pose))
    shift = se3_exp(np.array([0.05, -0.02, 0.08, 0.3, 0.2, -0.4]))
    new_poses = [pose.compose(shift) for pose in poses]
    for entry, pose in zip(archive, new_poses):
        entry.pose = pose
    rebuilt = rebuild_on_adjustment(tree, archive)
    fresh = OctreeMap(0.05, max_extent=8.0)
    for cloud, pose in zip(clouds, new_poses):
        integrate_cloud(fresh, cloud, pose)
    assert maps_equal(rebuilt, fresh, tol=1e-12)


def test_single_keyframe_voxel_shift():
    # translating the camera by exactly one voxel along +x (in world terms)
    # shifts every occupied cell index by one
    res = 0.05
    rng = np.random.default_rng(7)
    # grid-snapped points so the shift cannot cross cell boundaries unevenly
    base = rng.integers(-10, 10, size=(200, 3)) * res + res / 2.0
    cloud = PointCloud(base)
    tree = OctreeMap(res, max_extent=4.0)
    integrate_cloud(tree, cloud, Se3Pose.identity())
    shifted_pose = Se3Pose(np.eye(3), np.array([-res, 0.0, 0.0]))  # world +x shift
    tree2 = OctreeMap(res, max_extent=4.0)
    integrate_cloud(tree2, cloud, shifted_pose)
    idx1 = sorted(tuple(i) for i, _ in tree.cells())
    idx2 = sorted(tuple(i) for i, _ in tree2.cells())
    assert [(i + 1, j, k) for i, j, k in idx1] == idx2


def test_mapper_fifo_batching():
    rng = np.random.default_rng(8)
    clouds = [PointCloud(rng.uniform(-1, 1, size=(100, 3))) for _ in range(7)]
    mapper = VolumetricMapper(OctreeMap(0.05, max_extent=4.0), batch_size=3)
    for i, cloud in enumerate(clouds):
        mapper.submit(i, cloud, Se3Pose.identity())
    reports = mapper.process_batches()
    assert len(reports) == 6  # two full batches of three
    assert mapper.pending() == 1
    reports += mapper.process_batches(drain=True)
    assert len(reports) == 7
    assert [e.keyframe_id for e in mapper.archive] == list(range(7))


def test_batch_size_does_not_change_result():
    rng = np.random.default_rng(9)
    clouds = [PointCloud(rng.uniform(-1, 1, size=(150, 3))) for _ in range(6)]
    poses = [se3_exp(rng.normal(size=6) * 0.05) for _ in range(6)]

    def run(batch):
        mapper = VolumetricMapper(OctreeMap(0.05, max_extent=4.0), batch_size=batch)
        for i, (c, p) in enumerate(zip(clouds, poses)):
            mapper.submit(i, c, p)
        mapper.process_batches(drain=True)
        return mapper.octree

    assert maps_equal(run(1), run(5), tol=0.0)


def test_point_outside_root_rejected():
    tree = OctreeMap(0.1, max_extent=1.0)
    with pytest.raises(PointlineError):
        integrate_cloud(tree, PointCloud(np.array([[50.0, 0, 0]])), Se3Pose.identity())


def test_export_formats():
    tree = OctreeMap(0.1, max_extent=1.0)
    cloud_in = PointCloud(
        np.array([[0.05, 0.15, 0.25]]),
        colors=np.array([[1, 2, 3]]),
        normals=np.array([[0.0, 0.0, -1.0]]),
    )
    integrate_cloud(tree, cloud_in, Se3Pose.identity())
    cloud = extract_global_cloud(tree)
    ply = export_ply(cloud)
    head = ply.splitlines()
    assert head[0] == "ply" and "element vertex 1" in ply and "end_header" in ply
    body = ply.splitlines()[-1].split()
    assert len(body) == 9
    csv = export_csv(cloud)
    lines = csv.strip().splitlines()
    assert lines[0] == "x,y,z,r,g,b,nx,ny,nz"
    assert len(lines) == 2
    assert lines[1].split(",")[3:6] == ["1", "2", "3"]


def test_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), colors=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), normals=np.array([[1.0, 1.0, 0.0]]))
    with pytest.raises(ValueError):
        DepthImage(np.array([[-1.0]]))
    with pytest.raises(ValueError):
        OctreeMap(0.0)

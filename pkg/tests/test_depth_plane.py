import numpy as np
import pytest

from rdislam.depth_plane import (
    EmptyCloud,
    InsufficientNeighbors,
    OutOfFov,
    SubmapIndex,
    angular_cell_index,
    angular_cell_indices,
    depth_to_cloud,
    extract_plane_points,
    fit_plane_knn,
    fov_bounds_from_intrinsics,
    read_ply,
    write_ply,
)
from rdislam.geometry import CameraIntrinsics, Se3Pose, so3_exp

K = CameraIntrinsics(fx=250.0, fy=250.0, cx=320.0, cy=240.0, width=640, height=480)


def wall_depth_image(k, z0=2.0):
    """Fronto-parallel plane at Z=z0: constant depth everywhere."""
    return np.full((k.height, k.width), z0, dtype=np.float32)


def floor_depth_image(k, h=1.0):
    """Horizontal plane at Y=h (below camera): Z = h / y_hat."""
    v = np.arange(k.height, dtype=float)[:, None]
    y_hat = (v - k.cy) / k.fy
    z = np.where(y_hat > 1e-3, h / np.maximum(y_hat, 1e-3), 0.0)
    return np.broadcast_to(z, (k.height, k.width)).astype(np.float32)


# ---------------------------------------------------------------------------
# depth_to_cloud
# ---------------------------------------------------------------------------

def test_uniform_plane_cloud_count_and_depth():
    pts = depth_to_cloud(wall_depth_image(K, 2.0), K, stride=8)
    assert len(pts) == (640 // 8) * (480 // 8) == 4800
    np.testing.assert_allclose(pts[:, 2], 2.0)


def test_all_zero_depth_raises():
    with pytest.raises(EmptyCloud):
        depth_to_cloud(np.zeros((480, 640), dtype=np.float32), K, stride=8)


def test_two_plane_count_matches_pixelwise_oracle():
    depth = wall_depth_image(K, 2.0)
    depth[:, 320:] = 4.0
    depth[::7, ::11] = 0.0          # punch invalid holes
    depth[10:30, 40:90] = 25.0      # out of max range
    stride = 4
    pts = depth_to_cloud(depth, K, stride=stride)
    count = 0  # pixelwise reference scan
    for v in range(0, 480, stride):
        for u in range(0, 640, stride):
            if 0.05 < depth[v, u] < 10.0:
                count += 1
    assert len(pts) == count


def test_depth_scale_conversion():
    k = CameraIntrinsics(fx=250, fy=250, cx=320, cy=240, width=640, height=480,
                         depth_scale=5000.0)
    raw = np.full((480, 640), 10000, dtype=np.uint16)  # 2 m in TUM units
    pts = depth_to_cloud(raw, k, stride=16)
    np.testing.assert_allclose(pts[:, 2], 2.0)


# ---------------------------------------------------------------------------
# angular binning
# ---------------------------------------------------------------------------

FOV = (-0.6, 0.6, -0.5, 0.5)


def test_optical_axis_center_cell():
    assert angular_cell_index([0.0, 0.0, 2.0], FOV, M=16, N=24) == (8, 12)


def test_fov_boundary_last_column():
    alpha = FOV[1]
    p = [np.tan(alpha) * 2.0, 0.0, 2.0]
    row, col = angular_cell_index(p, FOV, M=16, N=24)
    assert col == 23


def test_out_of_fov_raises():
    with pytest.raises(OutOfFov):
        angular_cell_index([10.0, 0.0, 1.0], FOV, M=16, N=24)


def test_random_points_match_scalar_formula_oracle():
    rng = np.random.default_rng(11)
    amin, amax, tmin, tmax = FOV
    M, N = 16, 24
    alpha = rng.uniform(amin, amax, 1000)
    theta = rng.uniform(tmin, tmax, 1000)
    z = rng.uniform(0.5, 5.0, 1000)
    pts = np.stack([np.tan(alpha) * z, np.tan(theta) * z, z], axis=1)
    rows, cols, ok = angular_cell_indices(pts, FOV, M, N)
    assert ok.all()
    for i in range(1000):
        c = min(int((alpha[i] - amin) / (amax - amin) * N), N - 1)
        r = min(int((theta[i] - tmin) / (tmax - tmin) * M), M - 1)
        assert (rows[i], cols[i]) == (r, c)


# ---------------------------------------------------------------------------
# extract_plane_points
# ---------------------------------------------------------------------------

def test_single_plane_extraction_covers_cells_and_fits():
    depth = floor_depth_image(K, h=1.0)
    cloud = depth_to_cloud(depth, K, stride=6)
    feats = extract_plane_points(cloud, k=K, smoothness_threshold=0.2)
    assert len(feats) > 50
    # all extracted points lie exactly on the plane y = 1
    np.testing.assert_allclose(feats.points[:, 1], 1.0, atol=1e-6)
    # downstream PCA normal within 2 degrees of truth; k spans two cell rows
    # (points of one row are exactly collinear on a noise-free plane)
    idx = SubmapIndex(feats.points, origin=np.zeros(3))
    plane = fit_plane_knn(feats.points[len(feats) // 2], idx, k=20, radius_cap=5.0)
    assert plane.valid
    angle = np.degrees(np.arccos(abs(plane.normal @ np.array([0, 1, 0]))))
    assert angle < 2.0


def test_isolated_singleton_cells_give_empty_output():
    # one point per cell: smoothness undefined, cells skipped
    rng = np.random.default_rng(12)
    M, N = 8, 8
    amin, amax, tmin, tmax = FOV
    acenters = amin + (np.arange(N) + 0.5) / N * (amax - amin)
    tcenters = tmin + (np.arange(M) + 0.5) / M * (tmax - tmin)
    pts = []
    for t in tcenters:
        for a in acenters:
            z = rng.uniform(1, 3)
            pts.append([np.tan(a) * z, np.tan(t) * z, z])
    feats = extract_plane_points(np.array(pts), M=M, N=N, fov_bounds=FOV)
    assert len(feats) == 0


def test_box_corner_rejects_edge_cells():
    # two fronto-parallel faces with a depth jump: cells straddling the jump
    # have high smoothness, face-interior cells low
    depth = wall_depth_image(K, 1.5)
    depth[:, 320:] = 3.0
    cloud = depth_to_cloud(depth, K, stride=5)
    feats = extract_plane_points(cloud, k=K, smoothness_threshold=0.05,
                                 max_per_cell=2)
    assert len(feats) > 20
    on_face = (np.abs(feats.points[:, 2] - 1.5) < 0.01) | \
              (np.abs(feats.points[:, 2] - 3.0) < 0.01)
    assert on_face.mean() >= 0.9


def test_extraction_deterministic():
    depth = floor_depth_image(K, h=1.0)
    cloud = depth_to_cloud(depth, K, stride=6)
    a = extract_plane_points(cloud, k=K)
    b = extract_plane_points(cloud, k=K)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.smoothness, b.smoothness)


def test_extraction_empty_cloud_raises():
    with pytest.raises(EmptyCloud):
        extract_plane_points(np.zeros((0, 3)), fov_bounds=FOV)


def test_smoothness_below_threshold_invariant():
    depth = floor_depth_image(K, h=1.0)
    cloud = depth_to_cloud(depth, K, stride=6)
    feats = extract_plane_points(cloud, k=K, smoothness_threshold=0.05)
    assert (feats.smoothness < 0.05).all()


# ---------------------------------------------------------------------------
# fit_plane_knn
# ---------------------------------------------------------------------------

def test_fit_exact_coplanar():
    rng = np.random.default_rng(13)
    pts = np.zeros((10, 3))
    pts[:, :2] = rng.uniform(-1, 1, (10, 2))
    idx = SubmapIndex(pts, origin=np.array([0, 0, 5.0]))
    plane = fit_plane_knn(np.zeros(3), idx, k=10, radius_cap=5.0)
    assert plane.valid
    np.testing.assert_allclose(np.abs(plane.normal), [0, 0, 1], atol=1e-12)
    assert plane.normal[2] > 0  # sign toward viewing origin
    assert abs(plane.planarity) < 1e-12
    assert abs(plane.centroid[2]) < 1e-12


def test_fit_noisy_plane_normal_within_one_degree():
    rng = np.random.default_rng(14)
    pts = np.zeros((200, 3))
    pts[:, :2] = rng.uniform(-0.5, 0.5, (200, 2))
    pts[:, 2] = rng.normal(scale=1e-3, size=200)
    idx = SubmapIndex(pts, origin=np.array([0, 0, 3.0]))
    plane = fit_plane_knn(np.zeros(3), idx, k=20, radius_cap=5.0)
    assert plane.valid
    # closed-form PCA oracle on the same neighbor set
    _, nn = idx.tree.query(np.zeros(3), k=20)
    sub = pts[nn] - pts[nn].mean(axis=0)
    w, V = np.linalg.eigh(sub.T @ sub)
    oracle_n = V[:, 0] if V[2, 0] > 0 else -V[:, 0]
    assert np.degrees(np.arccos(np.clip(abs(plane.normal @ oracle_n), 0, 1))) < 1e-9
    assert np.degrees(np.arccos(abs(plane.normal @ np.array([0, 0, 1.0])))) < 1.0


def test_fit_collinear_invalid():
    pts = np.zeros((10, 3))
    pts[:, 0] = np.linspace(0, 0.4, 10)
    idx = SubmapIndex(pts)
    plane = fit_plane_knn(np.zeros(3), idx, k=10)
    assert not plane.valid


def test_fit_insufficient_neighbors():
    idx = SubmapIndex(np.zeros((5, 3)))
    with pytest.raises(InsufficientNeighbors):
        fit_plane_knn(np.zeros(3), idx, k=10)


def test_fit_radius_cap():
    pts = np.zeros((10, 3))
    pts[:, 0] = np.linspace(0, 9, 10)  # spread 9 m
    pts[:, 1] = np.linspace(0, 1, 10)
    idx = SubmapIndex(pts)
    plane = fit_plane_knn(np.zeros(3), idx, k=10, radius_cap=0.5)
    assert not plane.valid


def test_fit_normal_rigid_invariance():
    rng = np.random.default_rng(15)
    pts = np.zeros((100, 3))
    pts[:, :2] = rng.uniform(-0.4, 0.4, (100, 2))
    pts[:, 2] = rng.normal(scale=5e-4, size=100)
    origin = np.array([0.1, -0.2, 2.0])
    query = np.array([0.05, 0.05, 0.0])
    p0 = fit_plane_knn(query, SubmapIndex(pts, origin=origin), k=15, radius_cap=5.0)

    T = Se3Pose.from_rt(so3_exp(np.array([0.4, -0.3, 0.8])), np.array([1.0, 2.0, -0.5]))
    p1 = fit_plane_knn(T.transform(query),
                       SubmapIndex(T.transform(pts), origin=T.transform(origin)),
                       k=15, radius_cap=5.0)
    R = T.rotation_matrix()
    n_mapped = R @ p0.normal
    assert min(np.linalg.norm(p1.normal - n_mapped),
               np.linalg.norm(p1.normal + n_mapped)) < 1e-6


# ---------------------------------------------------------------------------
# PLY io
# ---------------------------------------------------------------------------

def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    pts = rng.uniform(-2, 2, (37, 3))
    path = tmp_path / "cloud.ply"
    write_ply(pts, path)
    back = read_ply(path)
    np.testing.assert_allclose(back, pts, atol=1e-6)
    text = path.read_text()
    assert text.startswith("ply\nformat ascii 1.0\n")
    assert "element vertex 37" in text

import numpy as np
import pytest
from scipy.linalg import expm

from rdislam.geometry import (
    CameraIntrinsics,
    DepthTooSmall,
    FrameMismatch,
    Se3Pose,
    compose,
    inverse,
    project,
    se3_adjoint,
    se3_exp,
    se3_left_jacobian_inv,
    se3_log,
    skew,
    so3_exp,
    so3_log,
    transform_point,
    unproject,
)

K = CameraIntrinsics(fx=100.0, fy=100.0, cx=320.0, cy=240.0, width=640, height=480)


def random_pose(rng, max_angle=3.0, max_trans=2.0):
    phi = rng.normal(size=3)
    phi = phi / np.linalg.norm(phi) * rng.uniform(0, max_angle)
    return Se3Pose.from_rt(so3_exp(phi), rng.uniform(-max_trans, max_trans, 3))


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def test_project_optical_axis():
    k = CameraIntrinsics(fx=100, fy=100, cx=0, cy=0, width=10, height=10)
    np.testing.assert_allclose(project(np.array([0.0, 0.0, 1.0]), k), [0.0, 0.0])


def test_project_example():
    np.testing.assert_allclose(project(np.array([1.0, 2.0, 4.0]), K), [345.0, 290.0])


def test_project_degenerate_depth():
    with pytest.raises(DepthTooSmall):
        project(np.array([0.0, 0.0, 0.0]), K)


def test_unproject_principal_point():
    np.testing.assert_allclose(unproject(np.array([320.0, 240.0]), 2.0, K), [0, 0, 2])


def test_unproject_round_trip_example():
    np.testing.assert_allclose(unproject(np.array([345.0, 290.0]), 4.0, K), [1, 2, 4])


def test_unproject_zero_depth():
    with pytest.raises(DepthTooSmall):
        unproject(np.array([100.0, 100.0]), 0.0, K)


def test_projection_round_trip_grid():
    # all pixels on a coarse grid, depths spanning [0.1, 10] m
    rng = np.random.default_rng(0)
    u = rng.uniform(0, K.width - 1, 500)
    v = rng.uniform(0, K.height - 1, 500)
    d = rng.uniform(0.1, 10.0, 500)
    px = np.stack([u, v], axis=1)
    pts = unproject(px, d, K)
    uv, valid = project(pts, K)
    assert valid.all()
    assert np.abs(uv - px).max() < 1e-9


# ---------------------------------------------------------------------------
# se3 exp/log
# ---------------------------------------------------------------------------

def test_se3_exp_zero():
    T = se3_exp(np.zeros(6))
    np.testing.assert_allclose(T.matrix(), np.eye(4), atol=1e-15)


def test_se3_exp_pure_rotation():
    T = se3_exp([0, 0, 0, 0, 0, np.pi / 2])
    np.testing.assert_allclose(T.t, 0, atol=1e-12)
    np.testing.assert_allclose(
        T.rotation_matrix(), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12
    )


def test_se3_exp_matches_matrix_exponential():
    # oracle: numerical matrix exponential of the 4x4 twist
    rng = np.random.default_rng(1)
    for _ in range(20):
        xi = rng.normal(size=6)
        xi[3:] = xi[3:] / np.linalg.norm(xi[3:]) * 0.3
        twist = np.zeros((4, 4))
        twist[:3, :3] = skew(xi[3:])
        twist[:3, 3] = xi[:3]
        np.testing.assert_allclose(se3_exp(xi).matrix(), expm(twist), atol=1e-9)


def test_se3_log_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(200):
        xi = rng.normal(size=6)
        phi_norm = rng.uniform(1e-12, 3.0)
        xi[3:] = xi[3:] / np.linalg.norm(xi[3:]) * phi_norm
        np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


def test_se3_exp_small_angle_branch():
    xi = np.array([0.1, -0.2, 0.3, 1e-10, -2e-10, 1e-10])
    np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-12)


# ---------------------------------------------------------------------------
# compose / inverse / transform
# ---------------------------------------------------------------------------

def test_identity_transform():
    p = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(transform_point(Se3Pose.identity(), p), p)


def test_translation_transform():
    T = Se3Pose(t=np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(transform_point(T, np.zeros(3)), [1, 0, 0])


def test_compose_inverse_is_identity():
    rng = np.random.default_rng(3)
    for _ in range(50):
        T = random_pose(rng)
        I = compose(T, inverse(T))
        assert I.rotation_angle() < 1e-10
        assert np.linalg.norm(I.t) < 1e-10


def test_compose_associativity_against_matrix_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        A, B = random_pose(rng), random_pose(rng)
        p = rng.normal(size=3)
        lhs = transform_point(compose(A, B), p)
        rhs = transform_point(A, transform_point(B, p))
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)
        # direct 4x4 matrix product oracle
        np.testing.assert_allclose(
            compose(A, B).matrix(), A.matrix() @ B.matrix(), atol=1e-10
        )


def test_quaternion_drift_over_long_compositions():
    rng = np.random.default_rng(5)
    steps = [se3_exp(rng.normal(scale=0.01, size=6)) for _ in range(200)]
    T = Se3Pose.identity()
    for i in range(100_000):
        T = T.compose(steps[i % len(steps)])
        if i % 20000 == 0:
            assert abs(T.q @ T.q - 1.0) < 1e-9
    assert abs(T.q @ T.q - 1.0) < 1e-9


def test_frame_tags_chain_and_mismatch():
    T_w_c = Se3Pose.identity(frame_tag="T_w_c")
    T_c_b = Se3Pose.identity(frame_tag="T_c_b")
    assert T_w_c.compose(T_c_b).frame_tag == "T_w_b"
    assert T_w_c.inverse().frame_tag == "T_c_w"
    with pytest.raises(FrameMismatch):
        T_w_c.compose(T_w_c)


def test_batch_transform_matches_loop():
    rng = np.random.default_rng(6)
    T = random_pose(rng)
    pts = rng.normal(size=(40, 3))
    batched = T.transform(pts)
    for i in range(len(pts)):
        np.testing.assert_allclose(batched[i], T.transform(pts[i]), atol=1e-12)


def test_adjoint_definition():
    rng = np.random.default_rng(7)
    for _ in range(20):
        T = random_pose(rng)
        xi = rng.normal(scale=0.2, size=6)
        lhs = compose(compose(T, se3_exp(xi)), inverse(T))
        rhs = se3_exp(se3_adjoint(T) @ xi)
        np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)


def test_se3_left_jacobian_inv_finite_difference():
    # d/d eps log(Exp(eps) Exp(xi)) at eps=0 equals Jl^-1(xi)
    rng = np.random.default_rng(8)
    for _ in range(20):
        xi = rng.normal(scale=0.5, size=6)
        T = se3_exp(xi)
        J = se3_left_jacobian_inv(xi)
        h = 1e-6
        J_fd = np.zeros((6, 6))
        for c in range(6):
            e = np.zeros(6)
            e[c] = h
            fp = se3_log(compose(se3_exp(e), T))
            fm = se3_log(compose(se3_exp(-e), T))
            J_fd[:, c] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(J, J_fd, atol=1e-5)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1, fy=1, cx=0, cy=0, width=10, height=10, depth_scale=0)

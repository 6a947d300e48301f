"""Rigid-body transforms, pinhole camera model, and Lie-group helpers.

Conventions used throughout the package:

- A pose stores a unit quaternion plus a translation vector.  A pose tagged
  ``"T_w_c"`` maps camera-frame coordinates into the world frame:
  ``p_w = R p_c + t`` (world-from-camera).
- se(3) tangent vectors are ordered ``[rho, phi]``: translation part first,
  rotation part second.  ``se3_exp`` / ``se3_log`` are the full SE(3)
  exponential, so the translation part goes through the SO(3) left Jacobian.
- State updates everywhere in the package are left-multiplicative:
  ``T <- se3_exp(delta) * T``.
- Pixels are ``(u, v)`` with ``u`` along image columns (x right, y down,
  z forward camera frame).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

_QUAT_NORM_TOL = 1e-9


class DepthTooSmall(ValueError):
    """Raised when a projection/unprojection depth is at or below min_depth."""


class FrameMismatch(ValueError):
    """Raised when composing poses whose frame tags do not chain."""


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z ordering, Hamilton convention)
# ---------------------------------------------------------------------------

def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _quat_normalize(q):
    n = np.sqrt(q @ q)
    if q[0] < 0.0:
        n = -n
    return q / n


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _quat_from_matrix(R):
    # Shepperd's method: pick the largest diagonal combination for stability.
    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    tr = m00 + m11 + m22
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s])
    elif m00 >= m11 and m00 >= m22:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2
        q = np.array([(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s])
    elif m11 >= m22:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2
        q = np.array([(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s])
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2
        q = np.array([(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s])
    return _quat_normalize(q)


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------

def skew(v):
    """3x3 skew-symmetric matrix such that skew(a) @ b == cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(phi):
    """Rotation matrix from an axis-angle vector (Rodrigues, Taylor branch)."""
    phi = np.asarray(phi, dtype=float)
    theta2 = phi @ phi
    K = skew(phi)
    if theta2 < 1e-16:
        return np.eye(3) + K + 0.5 * (K @ K)
    theta = np.sqrt(theta2)
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * K
        + ((1.0 - np.cos(theta)) / theta2) * (K @ K)
    )


def so3_log(R):
    """Axis-angle vector of a rotation matrix, angle in [0, pi]."""
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        # first-order: R ~ I + skew(phi)
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-6:
        # near pi the off-diagonal formula degenerates; use the diagonal
        A = 0.5 * (R + np.eye(3))  # = axis axis^T at theta == pi
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # fix signs from the largest axis component
        k = int(np.argmax(axis))
        if axis[k] > 0:
            for i in range(3):
                if i != k and A[k, i] < 0:
                    axis[i] = -axis[i]
        if R[2, 1] - R[1, 2] < 0 and axis[0] > 0:
            pass  # sign of the vee part is ~0 at pi; axis sign is a gauge choice
        return theta * axis / np.linalg.norm(axis)
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / np.sin(theta) * vee


def so3_left_jacobian(phi):
    """Left Jacobian of SO(3): exp((phi + dphi)^) ~ exp((Jl dphi)^) exp(phi^)."""
    phi = np.asarray(phi, dtype=float)
    theta2 = phi @ phi
    K = skew(phi)
    if theta2 < 1e-12:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    theta = np.sqrt(theta2)
    return (
        np.eye(3)
        + ((1.0 - np.cos(theta)) / theta2) * K
        + ((theta - np.sin(theta)) / (theta2 * theta)) * (K @ K)
    )


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta2 = phi @ phi
    K = skew(phi)
    if theta2 < 1e-12:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    theta = np.sqrt(theta2)
    cot_half = 1.0 / np.tan(0.5 * theta)
    coeff = (1.0 - 0.5 * theta * cot_half) / theta2
    return np.eye(3) - 0.5 * K + coeff * (K @ K)


def so3_right_jacobian(phi):
    """Right Jacobian: exp((phi + dphi)^) ~ exp(phi^) exp((Jr dphi)^)."""
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi):
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


# ---------------------------------------------------------------------------
# pose type
# ---------------------------------------------------------------------------

def _chain_tags(tag_a: Optional[str], tag_b: Optional[str]) -> Optional[str]:
    if tag_a is None or tag_b is None:
        return None
    pa, pb = tag_a.split("_"), tag_b.split("_")
    if len(pa) != 3 or len(pb) != 3:
        return None
    if pa[2] != pb[1]:
        raise FrameMismatch(f"cannot compose {tag_a} with {tag_b}")
    return f"T_{pa[1]}_{pb[2]}"


@dataclass
class Se3Pose:
    """Rigid transform as unit quaternion (w, x, y, z) plus translation.

    ``frame_tag`` documents the convention, e.g. ``"T_w_c"`` for a
    world-from-camera transform.  Tags are optional; when both operands of a
    composition carry a parseable tag the inner frames must chain.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame_tag: Optional[str] = None

    def __post_init__(self):
        self.q = _quat_normalize(np.asarray(self.q, dtype=float))
        self.t = np.asarray(self.t, dtype=float).reshape(3).copy()

    @classmethod
    def identity(cls, frame_tag=None):
        return cls(frame_tag=frame_tag)

    @classmethod
    def from_rt(cls, R, t, frame_tag=None):
        return cls(q=_quat_from_matrix(np.asarray(R, dtype=float)),
                   t=np.asarray(t, dtype=float), frame_tag=frame_tag)

    @classmethod
    def from_matrix(cls, T, frame_tag=None):
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3], frame_tag=frame_tag)

    def rotation_matrix(self):
        return _quat_to_matrix(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Se3Pose") -> "Se3Pose":
        q = _quat_normalize(_quat_mul(self.q, other.q))
        t = self.transform(other.t)
        return Se3Pose(q=q, t=t, frame_tag=_chain_tags(self.frame_tag, other.frame_tag))

    def __matmul__(self, other):
        return self.compose(other)

    def inverse(self) -> "Se3Pose":
        qi = _quat_conj(self.q)
        ti = -_quat_to_matrix(qi) @ self.t
        tag = None
        if self.frame_tag is not None:
            p = self.frame_tag.split("_")
            if len(p) == 3:
                tag = f"T_{p[2]}_{p[1]}"
        return Se3Pose(q=qi, t=ti, frame_tag=tag)

    def transform(self, points):
        """Apply the transform to one point (3,) or a batch (N, 3)."""
        points = np.asarray(points, dtype=float)
        R = self.rotation_matrix()
        if points.ndim == 1:
            return R @ points + self.t
        return points @ R.T + self.t

    def rotation_angle(self):
        """Rotation magnitude in radians."""
        w = np.clip(abs(self.q[0]), -1.0, 1.0)
        return 2.0 * np.arccos(w)

    def copy(self):
        return Se3Pose(q=self.q.copy(), t=self.t.copy(), frame_tag=self.frame_tag)

    def __repr__(self):
        tag = f", tag={self.frame_tag}" if self.frame_tag else ""
        return f"Se3Pose(q={np.round(self.q, 6)}, t={np.round(self.t, 6)}{tag})"


def compose(a: Se3Pose, b: Se3Pose) -> Se3Pose:
    return a.compose(b)


def inverse(T: Se3Pose) -> Se3Pose:
    return T.inverse()


def transform_point(T: Se3Pose, p):
    return T.transform(p)


# ---------------------------------------------------------------------------
# SE(3) exp / log / adjoint
# ---------------------------------------------------------------------------

def se3_exp(xi) -> Se3Pose:
    """SE(3) exponential of a tangent vector [rho, phi]."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    R = so3_exp(phi)
    t = so3_left_jacobian(phi) @ rho
    return Se3Pose.from_rt(R, t)


def se3_log(T: Se3Pose):
    """Tangent vector [rho, phi] such that se3_exp of it reproduces T."""
    phi = so3_log(T.rotation_matrix())
    rho = so3_left_jacobian_inv(phi) @ T.t
    return np.concatenate([rho, phi])


def se3_adjoint(T: Se3Pose):
    """6x6 adjoint with [rho, phi] ordering: Exp(Ad_T xi) = T Exp(xi) T^-1."""
    R = T.rotation_matrix()
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[:3, 3:] = skew(T.t) @ R
    A[3:, 3:] = R
    return A


def _se3_Q(rho, phi):
    # Barfoot's Q block of the SE(3) left Jacobian.
    rx, px = skew(rho), skew(phi)
    theta2 = phi @ phi
    theta = np.sqrt(theta2)
    if theta < 1e-4:
        c1 = 1.0 / 6.0 - theta2 / 120.0
        c2 = 1.0 / 24.0 - theta2 / 720.0
        c3 = 1.0 / 120.0 - theta2 / 2520.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = -(1.0 - theta2 / 2.0 - c) / theta**4
        c3 = -0.5 * (-c2 - 3.0 * (theta - s - theta**3 / 6.0) / theta**5)
    return (
        0.5 * rx
        + c1 * (px @ rx + rx @ px + px @ rx @ px)
        + c2 * (px @ px @ rx + rx @ px @ px - 3.0 * px @ rx @ px)
        + c3 * (px @ rx @ px @ px + px @ px @ rx @ px)
    )


def se3_left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    Jl = so3_left_jacobian(phi)
    J = np.zeros((6, 6))
    J[:3, :3] = Jl
    J[3:, 3:] = Jl
    J[:3, 3:] = _se3_Q(rho, phi)
    return J


def se3_left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    Jli = so3_left_jacobian_inv(phi)
    J = np.zeros((6, 6))
    J[:3, :3] = Jli
    J[3:, 3:] = Jli
    J[:3, 3:] = -Jli @ _se3_Q(rho, phi) @ Jli
    return J


# ---------------------------------------------------------------------------
# camera model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for a rectified image.

    ``depth_scale`` converts raw depth units into meters by division
    (5000 for TUM-format 16-bit depth, 1.0 for float depth in meters).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def matrix(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def half_fov(self):
        """(horizontal, vertical) half field of view in radians."""
        ha = max(np.arctan2(self.cx, self.fx),
                 np.arctan2(self.width - 1 - self.cx, self.fx))
        va = max(np.arctan2(self.cy, self.fy),
                 np.arctan2(self.height - 1 - self.cy, self.fy))
        return float(ha), float(va)


DEFAULT_MIN_DEPTH = 0.05
DEFAULT_MAX_DEPTH = 10.0


def project(p, k: CameraIntrinsics, min_depth: float = DEFAULT_MIN_DEPTH):
    """Project a camera-frame point (3,) or batch (N, 3) to pixels.

    No bounds clamping: callers check visibility. Raises DepthTooSmall for a
    single point with Z <= min_depth; batches return a validity mask instead.
    """
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        if p[2] <= min_depth:
            raise DepthTooSmall(f"Z={p[2]:.4f} <= min_depth={min_depth}")
        return np.array([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])
    valid = p[:, 2] > min_depth
    z = np.where(valid, p[:, 2], 1.0)
    uv = np.stack([k.fx * p[:, 0] / z + k.cx, k.fy * p[:, 1] / z + k.cy], axis=1)
    return uv, valid


def unproject(px, depth, k: CameraIntrinsics, min_depth: float = DEFAULT_MIN_DEPTH):
    """Back-project pixel(s) at metric depth(s) into the camera frame."""
    px = np.asarray(px, dtype=float)
    if px.ndim == 1:
        if depth <= min_depth:
            raise DepthTooSmall(f"depth={depth:.4f} <= min_depth={min_depth}")
        return np.array([(px[0] - k.cx) / k.fx * depth,
                         (px[1] - k.cy) / k.fy * depth,
                         depth])
    depth = np.asarray(depth, dtype=float)
    return np.stack([(px[:, 0] - k.cx) / k.fx * depth,
                     (px[:, 1] - k.cy) / k.fy * depth,
                     depth], axis=1)

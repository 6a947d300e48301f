"""IMU preintegration and legged-odometry relative measurements.

Preintegration accumulates gyro/accel samples between two frame stamps into
gravity-free motion deltas (dR, dv, dp) with a 9x9 covariance and the bias
Jacobians needed for first-order bias correction at solve time.  Integration
is midpoint over consecutive samples; the bias Jacobians are the exact first
derivatives of that discrete scheme, so finite-difference checks hold to
numerical precision.

Legged odometry is consumed as interpolated relative poses with a
distance-scaled drift covariance, and a divergence check compares the IMU
motion prediction against a legged (or constant-velocity) reference so the
back-end can swap factors when the IMU misbehaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    Se3Pose,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
)

GRAVITY_MAGNITUDE = 9.81


class NonMonotonicTimestamps(ValueError):
    pass


class SampleGap(ValueError):
    """Gap between consecutive IMU samples exceeded max_gap."""


class OutOfRange(ValueError):
    """Query stamp outside the odometry stream."""


@dataclass
class ImuNoise:
    """Continuous-time noise densities (per sqrt(Hz)) and walk rates."""

    gyro_density: float = 1.7e-4     # rad/s/sqrt(Hz)
    accel_density: float = 2.0e-3    # m/s^2/sqrt(Hz)
    gyro_walk: float = 1.9e-5        # rad/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-3       # m/s^3/sqrt(Hz)


@dataclass
class ImuBatch:
    """IMU samples spanning one frame interval, body frame.

    ``accel`` is specific force (includes the gravity reaction).
    """

    timestamps: np.ndarray   # (N,) seconds, strictly increasing
    gyro: np.ndarray         # (N, 3) rad/s
    accel: np.ndarray        # (N, 3) m/s^2

    accel_bound: float = 80.0

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if len(self.timestamps) >= 2 and np.any(np.diff(self.timestamps) <= 0):
            raise NonMonotonicTimestamps("IMU timestamps must strictly increase")

    def __len__(self):
        return len(self.timestamps)


@dataclass
class ImuPreintegration:
    """Gravity-free motion deltas between two stamps.

    ``delta_r`` is a rotation matrix; right-perturbation convention is used
    for its covariance/Jacobian blocks, state ordering (rot, vel, pos).
    """

    delta_r: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray
    dt: float
    covariance: np.ndarray                    # 9x9
    j_r_bg: np.ndarray                        # d(delta_r) / d(gyro bias)
    j_v_bg: np.ndarray
    j_v_ba: np.ndarray
    j_p_bg: np.ndarray
    j_p_ba: np.ndarray
    bias_gyro: np.ndarray                     # linearization point
    bias_accel: np.ndarray

    def corrected(self, bias_gyro, bias_accel):
        """First-order bias-corrected (dR, dv, dp) without re-integration."""
        dbg = np.asarray(bias_gyro, dtype=float) - self.bias_gyro
        dba = np.asarray(bias_accel, dtype=float) - self.bias_accel
        dR = self.delta_r @ so3_exp(self.j_r_bg @ dbg)
        dv = self.delta_v + self.j_v_bg @ dbg + self.j_v_ba @ dba
        dp = self.delta_p + self.j_p_bg @ dbg + self.j_p_ba @ dba
        return dR, dv, dp

    def predict(self, pose_i: Se3Pose, v_i, gravity,
                bias_gyro=None, bias_accel=None):
        """Propagate a world-frame state across the interval.

        ``pose_i`` is world-from-body; returns (pose_j, v_j).
        """
        bg = self.bias_gyro if bias_gyro is None else bias_gyro
        ba = self.bias_accel if bias_accel is None else bias_accel
        dR, dv, dp = self.corrected(bg, ba)
        R_i = pose_i.rotation_matrix()
        g = np.asarray(gravity, dtype=float)
        v_i = np.asarray(v_i, dtype=float)
        R_j = R_i @ dR
        v_j = v_i + g * self.dt + R_i @ dv
        p_j = pose_i.t + v_i * self.dt + 0.5 * g * self.dt**2 + R_i @ dp
        return Se3Pose.from_rt(R_j, p_j), v_j

    def compose(self, other: "ImuPreintegration") -> "ImuPreintegration":
        """Chain with a following interval (same linearization biases)."""
        dR1, dv1, dp1 = self.delta_r, self.delta_v, self.delta_p
        dt2 = other.dt
        out = ImuPreintegration(
            delta_r=dR1 @ other.delta_r,
            delta_v=dv1 + dR1 @ other.delta_v,
            delta_p=dp1 + dv1 * dt2 + dR1 @ other.delta_p,
            dt=self.dt + dt2,
            covariance=np.zeros((9, 9)),
            j_r_bg=other.delta_r.T @ self.j_r_bg + other.j_r_bg,
            j_v_bg=self.j_v_bg + dR1 @ other.j_v_bg
            - dR1 @ skew(other.delta_v) @ self.j_r_bg,
            j_v_ba=self.j_v_ba + dR1 @ other.j_v_ba,
            j_p_bg=self.j_p_bg + self.j_v_bg * dt2 + dR1 @ other.j_p_bg
            - dR1 @ skew(other.delta_p) @ self.j_r_bg,
            j_p_ba=self.j_p_ba + self.j_v_ba * dt2 + dR1 @ other.j_p_ba,
            bias_gyro=self.bias_gyro,
            bias_accel=self.bias_accel,
        )
        # covariance: transport this interval's block through the second
        F = np.eye(9)
        F[:3, :3] = other.delta_r.T
        F[3:6, :3] = -dR1 @ skew(other.delta_v)
        F[6:9, :3] = -dR1 @ skew(other.delta_p)
        F[6:9, 3:6] = np.eye(3) * dt2
        out.covariance = F @ self.covariance @ F.T + other.covariance
        return out


def imu_preintegrate(batch: ImuBatch, bias_gyro=None, bias_accel=None,
                     noise: Optional[ImuNoise] = None,
                     max_gap: float = 0.05) -> ImuPreintegration:
    """Midpoint preintegration of an IMU batch.

    Requires at least two samples; raises SampleGap when consecutive stamps
    are further apart than ``max_gap`` seconds.
    """
    if len(batch) < 2:
        raise ValueError("need at least two IMU samples to preintegrate")
    noise = noise or ImuNoise()
    bg = np.zeros(3) if bias_gyro is None else np.asarray(bias_gyro, dtype=float)
    ba = np.zeros(3) if bias_accel is None else np.asarray(bias_accel, dtype=float)

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    P = np.zeros((9, 9))
    j_r_bg = np.zeros((3, 3))
    j_v_bg = np.zeros((3, 3))
    j_v_ba = np.zeros((3, 3))
    j_p_bg = np.zeros((3, 3))
    j_p_ba = np.zeros((3, 3))

    ts, gyr, acc = batch.timestamps, batch.gyro, batch.accel
    for k in range(len(ts) - 1):
        dt = ts[k + 1] - ts[k]
        if dt > max_gap:
            raise SampleGap(f"IMU gap {dt:.4f}s exceeds max_gap={max_gap}s")
        w_mid = 0.5 * (gyr[k] + gyr[k + 1]) - bg
        a0 = acc[k] - ba
        a1 = acc[k + 1] - ba
        theta = w_mid * dt
        E = so3_exp(theta)
        Jr = so3_right_jacobian(theta)
        dR_next = dR @ E
        a_mid = 0.5 * (dR @ a0 + dR_next @ a1)

        # exact first-order derivative of this step w.r.t. the biases
        j_r_bg_next = E.T @ j_r_bg - Jr * dt
        A = -0.5 * (dR @ skew(a0) @ j_r_bg + dR_next @ skew(a1) @ j_r_bg_next)
        B = -0.5 * (dR + dR_next)
        j_p_bg = j_p_bg + j_v_bg * dt + 0.5 * A * dt**2
        j_p_ba = j_p_ba + j_v_ba * dt + 0.5 * B * dt**2
        j_v_bg = j_v_bg + A * dt
        j_v_ba = j_v_ba + B * dt
        j_r_bg = j_r_bg_next

        # covariance propagation, white noise mapped through the same linearization
        C = -0.5 * (dR @ skew(a0) + dR_next @ skew(a1) @ E.T)
        F = np.eye(9)
        F[:3, :3] = E.T
        F[3:6, :3] = C * dt
        F[6:9, :3] = 0.5 * C * dt**2
        F[6:9, 3:6] = np.eye(3) * dt
        G = np.zeros((9, 6))
        Rbar = 0.5 * (dR + dR_next)
        G[:3, :3] = Jr * dt
        G[3:6, 3:] = Rbar * dt
        G[6:9, 3:] = 0.5 * Rbar * dt**2
        Qc = np.zeros((6, 6))
        Qc[:3, :3] = np.eye(3) * noise.gyro_density**2 / dt
        Qc[3:, 3:] = np.eye(3) * noise.accel_density**2 / dt
        P = F @ P @ F.T + G @ Qc @ G.T
        P = 0.5 * (P + P.T)

        dp = dp + dv * dt + 0.5 * a_mid * dt**2
        dv = dv + a_mid * dt
        dR = dR_next

    return ImuPreintegration(
        delta_r=dR, delta_v=dv, delta_p=dp, dt=float(ts[-1] - ts[0]),
        covariance=P, j_r_bg=j_r_bg, j_v_bg=j_v_bg, j_v_ba=j_v_ba,
        j_p_bg=j_p_bg, j_p_ba=j_p_ba, bias_gyro=bg.copy(), bias_accel=ba.copy(),
    )


# ---------------------------------------------------------------------------
# legged odometry
# ---------------------------------------------------------------------------

def _slerp(qa, qb, alpha):
    dot = qa @ qb
    if dot < 0:
        qb = -qb
        dot = -dot
    if dot > 1 - 1e-10:
        q = qa + alpha * (qb - qa)
        return q / np.linalg.norm(q)
    omega = np.arccos(np.clip(dot, -1, 1))
    s = np.sin(omega)
    return (np.sin((1 - alpha) * omega) * qa + np.sin(alpha * omega) * qb) / s


@dataclass
class LeggedOdometry:
    """Timestamped pose stream in the legged-odometry frame."""

    timestamps: np.ndarray
    poses: list        # list[Se3Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.timestamps) >= 2 and np.any(np.diff(self.timestamps) <= 0):
            raise NonMonotonicTimestamps("legged timestamps must strictly increase")

    def __len__(self):
        return len(self.timestamps)

    def interpolate(self, t: float) -> Se3Pose:
        ts = self.timestamps
        if t < ts[0] or t > ts[-1]:
            raise OutOfRange(f"t={t} outside odometry span [{ts[0]}, {ts[-1]}]")
        j = int(np.searchsorted(ts, t))
        if j == 0 or ts[j] == t:
            return self.poses[j].copy()
        a, b = self.poses[j - 1], self.poses[j]
        alpha = (t - ts[j - 1]) / (ts[j] - ts[j - 1])
        q = _slerp(a.q, b.q, alpha)
        trans = (1 - alpha) * a.t + alpha * b.t
        return Se3Pose(q=q, t=trans)

    def path_length(self, t_i: float, t_j: float) -> float:
        lo, hi = min(t_i, t_j), max(t_i, t_j)
        ts = self.timestamps
        inside = np.flatnonzero((ts > lo) & (ts < hi))
        stops = [self.interpolate(lo).t]
        stops += [self.poses[k].t for k in inside]
        stops.append(self.interpolate(hi).t)
        stops = np.asarray(stops)
        return float(np.linalg.norm(np.diff(stops, axis=0), axis=1).sum())


def legged_relative_pose(odom: LeggedOdometry, t_i: float, t_j: float,
                         sigma_trans_per_m: float = 0.02,
                         sigma_rot_per_m: float = np.deg2rad(0.5),
                         floor_trans: float = 1e-4,
                         floor_rot: float = np.deg2rad(0.02)):
    """Relative pose between two stamps plus a drift-model covariance.

    SLERP rotation / linear translation interpolation at both stamps;
    covariance is diagonal, scaled by the path length traveled between them
    (never below small floors so it stays invertible).
    """
    T_i = odom.interpolate(t_i)
    T_j = odom.interpolate(t_j)
    rel = T_i.inverse().compose(T_j)
    L = odom.path_length(t_i, t_j)
    st = max(floor_trans, sigma_trans_per_m * L)
    sr = max(floor_rot, sigma_rot_per_m * L)
    cov = np.diag([st**2] * 3 + [sr**2] * 3)
    return rel, cov


@dataclass
class DivergenceReport:
    diverged: bool
    translation_error: float
    rotation_error: float


def imu_divergence_check(imu_pred: Se3Pose, reference: Se3Pose,
                         tau_trans: float = 0.10,
                         tau_rot: float = np.deg2rad(5.0)) -> DivergenceReport:
    """Flag the IMU prediction when it strictly exceeds either threshold."""
    rel = reference.inverse().compose(imu_pred)
    dt = float(np.linalg.norm(rel.t))
    dr = float(rel.rotation_angle())
    return DivergenceReport(diverged=(dt > tau_trans) or (dr > tau_rot),
                            translation_error=dt, rotation_error=dr)


def estimate_gravity_from_stationary(batch: ImuBatch, window: float = 0.5,
                                     magnitude: float = GRAVITY_MAGNITUDE,
                                     max_std: float = 0.5):
    """Gravity vector in the initial body frame from a stationary window.

    Returns None when the window is too short or not stationary enough
    (callers fall back to an externally supplied gravity).
    """
    if len(batch) < 10:
        return None
    t0 = batch.timestamps[0]
    sel = batch.timestamps <= t0 + window
    if sel.sum() < 10:
        return None
    acc = batch.accel[sel]
    if acc.std(axis=0).max() > max_std:
        return None
    mean = acc.mean(axis=0)
    n = np.linalg.norm(mean)
    if n < 1e-6:
        return None
    return -mean / n * magnitude

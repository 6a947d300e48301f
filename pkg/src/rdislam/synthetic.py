"""Synthetic RGB-D/IMU/legged sequence generation.

Scenes are collections of textured rectangles ray-cast into gray + depth
images; trajectories are C2 cubic splines (positions plus rotation vectors),
so IMU body rates and specific forces come from analytic derivatives.
Legged odometry is the ground truth composed with a slow random-walk drift.
These sequences are the test oracle for the tracking / registration /
back-end stack: every rendered depth pixel equals the analytic ray-plane
intersection, and preintegrating the synthesized IMU reproduces the spline's
relative motion.

World convention matches the initial camera frame: x right, y down,
z forward; gravity points along +y.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from .dataset import FrameRef, SequenceManifest, Trajectory
from .geometry import CameraIntrinsics, Se3Pose, so3_exp, so3_right_jacobian
from .preintegration import GRAVITY_MAGNITUDE, ImuNoise, LeggedOdometry

DEFAULT_GRAVITY = np.array([0.0, GRAVITY_MAGNITUDE, 0.0])  # +y is down


class InvalidSpline(ValueError):
    pass


# ---------------------------------------------------------------------------
# scene model
# ---------------------------------------------------------------------------

@dataclass
class Rect:
    """Finite textured rectangle: center, two in-plane unit axes, extents."""

    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float
    base_gray: float = 128.0
    texture_amp: float = 30.0
    texture_seed: int = 0
    n_waves: int = 10
    min_wavelength: float = 0.08     # meters on the surface
    max_wavelength: float = 0.6

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.axis_u = np.asarray(self.axis_u, dtype=float)
        self.axis_u = self.axis_u / np.linalg.norm(self.axis_u)
        self.axis_v = np.asarray(self.axis_v, dtype=float)
        self.axis_v = self.axis_v / np.linalg.norm(self.axis_v)
        self.normal = np.cross(self.axis_u, self.axis_v)
        rng = np.random.default_rng(self.texture_seed)
        lam = rng.uniform(self.min_wavelength, self.max_wavelength, self.n_waves)
        ang = rng.uniform(0, np.pi, self.n_waves)
        self._kx = 2 * np.pi / lam * np.cos(ang)
        self._ky = 2 * np.pi / lam * np.sin(ang)
        self._phase = rng.uniform(0, 2 * np.pi, self.n_waves)
        # texture_amp is the contrast std; normalize the wave sum to match
        self._wave_amp = self.texture_amp * np.sqrt(2.0 / self.n_waves)

    def gray_at(self, pu, pv):
        g = np.full(np.shape(pu), self.base_gray, dtype=float)
        if self.texture_amp > 0:
            for kx, ky, ph in zip(self._kx, self._ky, self._phase):
                g += self._wave_amp * np.sin(kx * pu + ky * pv + ph)
        return g


@dataclass
class Scene:
    rects: List[Rect]
    background_gray: float = 12.0


def render(scene: Scene, pose_w_c: Se3Pose, k: CameraIntrinsics,
           min_depth: float = 0.05):
    """Ray-cast gray (float) and depth (float32 meters, 0 = no hit)."""
    R = pose_w_c.rotation_matrix()
    o = pose_w_c.t
    v, u = np.mgrid[0:k.height, 0:k.width].astype(float)
    dirs = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    dirs_w = dirs @ R.T                       # rays in world; z-component = depth unit
    best_t = np.full((k.height, k.width), np.inf)
    gray = np.full((k.height, k.width), scene.background_gray)
    for rect in scene.rects:
        denom = dirs_w @ rect.normal
        num = (rect.center - o) @ rect.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        hit = o + t[..., None] * dirs_w
        rel = hit - rect.center
        pu = rel @ rect.axis_u
        pv = rel @ rect.axis_v
        ok = (np.abs(denom) > 1e-12) & (t > min_depth) & (t < best_t) \
            & (np.abs(pu) <= rect.half_u) & (np.abs(pv) <= rect.half_v)
        if ok.any():
            gray[ok] = rect.gray_at(pu[ok], pv[ok])
            best_t[ok] = t[ok]
    depth = np.where(np.isfinite(best_t), best_t, 0.0).astype(np.float32)
    return gray, depth


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

class SplineTrajectory:
    """C2 pose trajectory: cubic position and rotation-vector splines.

    Body rates follow from the rotation-vector derivative through the SO(3)
    right Jacobian; accelerations are the position spline's second
    derivative, both analytic.
    """

    def __init__(self, times, positions, rotvecs, clamped: bool = True):
        times = np.asarray(times, dtype=float)
        positions = np.asarray(positions, dtype=float)
        rotvecs = np.asarray(rotvecs, dtype=float)
        if len(times) < 2 or np.any(np.diff(times) <= 0):
            raise InvalidSpline("need >= 2 strictly increasing knot times")
        if np.max(np.linalg.norm(rotvecs, axis=1)) > 3.0:
            raise InvalidSpline("rotation-vector knots must stay below pi")
        bc = ((1, np.zeros(3)), (1, np.zeros(3))) if clamped else "natural"
        self._p = CubicSpline(times, positions, axis=0, bc_type=bc)
        self._r = CubicSpline(times, rotvecs, axis=0, bc_type=bc)
        self._dp = self._p.derivative()
        self._ddp = self._p.derivative(2)
        self._dr = self._r.derivative()
        self.t0 = float(times[0])
        self.t1 = float(times[-1])

    def pose(self, t: float) -> Se3Pose:
        return Se3Pose.from_rt(so3_exp(self._r(t)), self._p(t), frame_tag="T_w_c")

    def velocity(self, t: float):
        return self._dp(t)

    def acceleration(self, t: float):
        return self._ddp(t)

    def angular_velocity_body(self, t: float):
        return so3_right_jacobian(self._r(t)) @ self._dr(t)

    def specific_force_body(self, t: float, gravity=DEFAULT_GRAVITY):
        R = so3_exp(self._r(t))
        return R.T @ (self._ddp(t) - np.asarray(gravity, dtype=float))


# ---------------------------------------------------------------------------
# sensor synthesis
# ---------------------------------------------------------------------------

@dataclass
class ImuBurst:
    """A distortion window adding alternating accel spikes (legged-impact
    style), optionally with gyro spikes."""

    t_start: float
    t_end: float
    accel_amp: float = 40.0
    gyro_amp: float = 0.0
    freq: float = 50.0


@dataclass
class SensorSpec:
    frame_rate: float = 30.0
    imu_rate: float = 200.0
    legged_rate: float = 200.0
    imu_noise: Optional[ImuNoise] = None          # None = noise free
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    imu_bursts: List[ImuBurst] = field(default_factory=list)
    legged_drift_trans_per_m: float = 0.0         # random-walk sigma per meter
    legged_drift_rot_per_m: float = 0.0
    depth_noise: bool = False                     # sigma(z) = 1mm + 2.5mm z^2
    gray_noise_sigma: float = 0.0
    motion_blur_steps: int = 1                    # >1 averages sub-exposures
    exposure_time: float = 0.015
    gravity: np.ndarray = field(default_factory=lambda: DEFAULT_GRAVITY.copy())


def synthesize_imu(traj: SplineTrajectory, spec: SensorSpec, rng):
    ts = np.arange(traj.t0, traj.t1 + 1e-9, 1.0 / spec.imu_rate)
    gyro = np.stack([traj.angular_velocity_body(t) for t in ts])
    accel = np.stack([traj.specific_force_body(t, spec.gravity) for t in ts])
    gyro = gyro + spec.gyro_bias
    accel = accel + spec.accel_bias
    if spec.imu_noise is not None:
        sg = spec.imu_noise.gyro_density * np.sqrt(spec.imu_rate)
        sa = spec.imu_noise.accel_density * np.sqrt(spec.imu_rate)
        gyro = gyro + rng.normal(scale=sg, size=gyro.shape)
        accel = accel + rng.normal(scale=sa, size=accel.shape)
    for burst in spec.imu_bursts:
        sel = (ts >= burst.t_start) & (ts < burst.t_end)
        if not sel.any():
            continue
        wave = np.sign(np.sin(2 * np.pi * burst.freq * ts[sel]))
        wave[wave == 0] = 1.0
        accel[sel] += burst.accel_amp * wave[:, None] * np.array([1.0, -0.7, 0.5])
        if burst.gyro_amp:
            gyro[sel] += burst.gyro_amp * wave[:, None] * np.array([0.4, 1.0, -0.6])
    return {"timestamps": ts, "gyro": gyro, "accel": accel}


def synthesize_legged(traj: SplineTrajectory, spec: SensorSpec, rng
                      ) -> LeggedOdometry:
    ts = np.arange(traj.t0, traj.t1 + 1e-9, 1.0 / spec.legged_rate)
    poses = []
    drift = Se3Pose.identity()
    prev_pos = traj.pose(ts[0]).t
    for t in ts:
        truth = traj.pose(t)
        step = float(np.linalg.norm(truth.t - prev_pos))
        prev_pos = truth.t
        if step > 0 and (spec.legged_drift_trans_per_m > 0
                         or spec.legged_drift_rot_per_m > 0):
            xi = np.concatenate([
                rng.normal(scale=max(spec.legged_drift_trans_per_m, 1e-12)
                           * np.sqrt(step), size=3),
                rng.normal(scale=max(spec.legged_drift_rot_per_m, 1e-12)
                           * np.sqrt(step), size=3)])
            from .geometry import se3_exp
            drift = se3_exp(xi).compose(drift)
        poses.append(drift.compose(truth))
    return LeggedOdometry(ts, poses)


def generate_synthetic_sequence(scene: Scene, traj: SplineTrajectory,
                                k: CameraIntrinsics,
                                spec: Optional[SensorSpec] = None,
                                seed: int = 0,
                                with_imu: bool = True,
                                with_legged: bool = True) -> SequenceManifest:
    """Render frames along the trajectory and synthesize IMU/legged streams.

    Frames are quantized to uint8 gray / float32 metric depth
    (depth_scale = 1); ground truth is the spline sampled at frame stamps.
    """
    spec = spec or SensorSpec()
    rng = np.random.default_rng(seed)
    frame_ts = np.arange(traj.t0, traj.t1 + 1e-9, 1.0 / spec.frame_rate)
    frames = []
    gt_poses = []
    for t in frame_ts:
        if spec.motion_blur_steps > 1:
            subs = np.linspace(t - spec.exposure_time / 2,
                               t + spec.exposure_time / 2,
                               spec.motion_blur_steps)
            subs = np.clip(subs, traj.t0, traj.t1)
            gray = np.mean([render(scene, traj.pose(ts), k)[0] for ts in subs],
                           axis=0)
            _, depth = render(scene, traj.pose(t), k)
        else:
            gray, depth = render(scene, traj.pose(t), k)
        if spec.gray_noise_sigma > 0:
            gray = gray + rng.normal(scale=spec.gray_noise_sigma, size=gray.shape)
        if spec.depth_noise:
            sigma = 0.001 + 0.0025 * depth ** 2
            noisy = depth + rng.normal(size=depth.shape) * sigma
            depth = np.where(depth > 0, noisy, 0.0).astype(np.float32)
        gray8 = np.clip(np.round(gray), 0, 255).astype(np.uint8)
        frames.append(FrameRef(timestamp=float(t), rgb=gray8, depth=depth))
        gt_poses.append(traj.pose(t))

    imu = synthesize_imu(traj, spec, rng) if with_imu else None
    legged = synthesize_legged(traj, spec, rng) if with_legged else None
    intr = CameraIntrinsics(fx=k.fx, fy=k.fy, cx=k.cx, cy=k.cy,
                            width=k.width, height=k.height, depth_scale=1.0)
    return SequenceManifest(intrinsics=intr, frames=frames,
                            groundtruth=Trajectory(frame_ts, gt_poses),
                            imu=imu, legged=legged)


# ---------------------------------------------------------------------------
# stock scenes (desk scale)
# ---------------------------------------------------------------------------

def _box(center, size, base_gray, amp, seed, **kw) -> List[Rect]:
    cx, cy, cz = center
    sx, sy, sz = np.asarray(size) / 2.0
    faces = [
        Rect([cx - sx, cy, cz], [0, 0, 1], [0, 1, 0], sz, sy, base_gray, amp, seed, **kw),
        Rect([cx + sx, cy, cz], [0, 0, 1], [0, 1, 0], sz, sy, base_gray * 0.9, amp, seed + 1, **kw),
        Rect([cx, cy - sy, cz], [1, 0, 0], [0, 0, 1], sx, sz, base_gray * 1.1, amp, seed + 2, **kw),
        Rect([cx, cy + sy, cz], [1, 0, 0], [0, 0, 1], sx, sz, base_gray * 0.8, amp, seed + 3, **kw),
        Rect([cx, cy, cz - sz], [1, 0, 0], [0, 1, 0], sx, sy, base_gray * 1.05, amp, seed + 4, **kw),
        Rect([cx, cy, cz + sz], [1, 0, 0], [0, 1, 0], sx, sy, base_gray * 0.95, amp, seed + 5, **kw),
    ]
    return faces


def make_room_scene(texture_amp: float = 26.0, seed: int = 100) -> Scene:
    """Textured box room, camera starting near its center looking +z."""
    rects = [
        # back wall, floor, ceiling, side walls (room spans z in [-3, 4])
        Rect([0, 0, 4.0], [1, 0, 0], [0, 1, 0], 3.2, 2.0, 150, texture_amp, seed),
        Rect([0, 1.4, 0.5], [1, 0, 0], [0, 0, 1], 3.2, 3.6, 110, texture_amp, seed + 1),
        Rect([0, -1.6, 0.5], [1, 0, 0], [0, 0, 1], 3.2, 3.6, 95, texture_amp, seed + 2),
        Rect([-3.0, 0, 0.5], [0, 0, 1], [0, 1, 0], 3.6, 2.0, 130, texture_amp, seed + 3),
        Rect([3.0, 0, 0.5], [0, 0, 1], [0, 1, 0], 3.6, 2.0, 120, texture_amp, seed + 4),
        Rect([0, 0, -3.0], [1, 0, 0], [0, 1, 0], 3.2, 2.0, 140, texture_amp, seed + 5),
    ]
    rects += _box([-1.0, 0.9, 2.2], [0.8, 1.0, 0.8], 170, texture_amp, seed + 10)
    rects += _box([1.2, 1.0, 2.8], [0.9, 0.8, 0.9], 80, texture_amp, seed + 20)
    return Scene(rects)


def make_corridor_scene(texture_amp: float = 1.5, seed: int = 200,
                        length: float = 12.0) -> Scene:
    """Texture-less corridor along +z with boxes: geometry-rich, texture-poor."""
    half = length / 2
    rects = [
        Rect([0, 1.4, half - 1], [1, 0, 0], [0, 0, 1], 1.6, half + 1, 105, texture_amp, seed),
        Rect([0, -1.4, half - 1], [1, 0, 0], [0, 0, 1], 1.6, half + 1, 88, texture_amp, seed + 1),
        Rect([-1.6, 0, half - 1], [0, 0, 1], [0, 1, 0], half + 1, 1.5, 125, texture_amp, seed + 2),
        Rect([1.6, 0, half - 1], [0, 0, 1], [0, 1, 0], half + 1, 1.5, 112, texture_amp, seed + 3),
        Rect([0, 0, length], [1, 0, 0], [0, 1, 0], 1.7, 1.5, 140, texture_amp, seed + 4),
    ]
    z = 1.5
    i = 0
    while z < length - 1:
        side = -1.0 if i % 2 == 0 else 1.0
        rects += _box([side * 1.1, 0.9, z], [0.55, 0.9, 0.55],
                      60 + 25 * (i % 3), texture_amp, seed + 30 + 7 * i)
        z += 1.7
        i += 1
    return Scene(rects)


def make_mixed_scene(seed: int = 0, texture_amp: float = 14.0) -> Scene:
    """Medium-texture room with scattered boxes; per-seed layout variation."""
    rng = np.random.default_rng(seed)
    scene = make_room_scene(texture_amp=texture_amp, seed=300 + seed)
    # one low-texture wall stretch to stress the visual-only configuration
    scene.rects[0].texture_amp = 2.0
    for j in range(2):
        cx = rng.uniform(-1.5, 1.5)
        cz = rng.uniform(1.8, 3.2)
        scene.rects += _box([cx, rng.uniform(0.7, 1.1), cz],
                            [0.6, 0.9, 0.6], rng.uniform(70, 180),
                            texture_amp, 400 + seed * 31 + j * 7)
    return Scene(scene.rects)


def stationary_then_move(waypoints, hold: float = 0.7, step: float = 0.35,
                         rot_waypoints=None):
    """Knot arrays for a spline that holds still first (gravity init)."""
    waypoints = np.asarray(waypoints, dtype=float)
    n = len(waypoints)
    times = np.concatenate([[0.0], hold + step * np.arange(n)])
    positions = np.vstack([waypoints[0], waypoints])
    if rot_waypoints is None:
        rotvecs = np.zeros((n + 1, 3))
    else:
        rot_waypoints = np.asarray(rot_waypoints, dtype=float)
        rotvecs = np.vstack([rot_waypoints[0], rot_waypoints])
    return times, positions, rotvecs

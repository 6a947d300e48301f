"""Sequence manifests, TUM-layout dataset loading, and trajectory files.

A sequence manifest lists time-aligned RGB/depth frames (file-backed or
in-memory arrays) plus optional ground truth, IMU and legged-odometry
streams.  Trajectories use the TUM text format:
``timestamp tx ty tz qx qy qz qw`` with 6 decimal places.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Se3Pose
from .preintegration import LeggedOdometry

TUM_DEPTH_SCALE = 5000.0
TUM_DEFAULT_INTRINSICS = dict(fx=525.0, fy=525.0, cx=319.5, cy=239.5,
                              width=640, height=480, depth_scale=TUM_DEPTH_SCALE)
MAX_ASSOCIATION_OFFSET = 0.02


class MissingIndexFile(FileNotFoundError):
    pass


class NoAssociations(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message, line_number=None):
        self.line_number = line_number
        super().__init__(f"{message}"
                         + (f" (line {line_number})" if line_number else ""))


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: List[Se3Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.timestamps) >= 2 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must strictly increase")

    def __len__(self):
        return len(self.timestamps)

    def positions(self):
        return np.array([p.t for p in self.poses])


def write_trajectory(traj: Trajectory, path):
    """TUM format: 'timestamp tx ty tz qx qy qz qw', 6 decimals."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in zip(traj.timestamps, traj.poses):
            w, x, y, z = pose.q
            tx, ty, tz = pose.t
            f.write(f"{t:.6f} {tx:.6f} {ty:.6f} {tz:.6f} "
                    f"{x:.6f} {y:.6f} {z:.6f} {w:.6f}\n")


def read_trajectory(path) -> Trajectory:
    times, poses = [], []
    try:
        lines = open(path).readlines()
    except OSError as e:
        raise IOError(f"cannot read trajectory file {path}: {e}")
    for ln, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 8:
            raise ParseError(f"expected 8 fields, got {len(parts)}", ln)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"non-numeric field in '{s}'", ln)
        t, tx, ty, tz, qx, qy, qz, qw = vals
        times.append(t)
        poses.append(Se3Pose(q=np.array([qw, qx, qy, qz]), t=np.array([tx, ty, tz])))
    return Trajectory(np.array(times), poses)


@dataclass
class FrameRef:
    """One associated RGB-D capture; images may be paths or arrays."""

    timestamp: float
    rgb: Union[str, np.ndarray]
    depth: Union[str, np.ndarray]


@dataclass
class SequenceManifest:
    intrinsics: CameraIntrinsics
    frames: List[FrameRef]
    groundtruth: Optional[Trajectory] = None
    imu: Optional[dict] = None           # {"timestamps", "gyro", "accel"}
    legged: Optional[LeggedOdometry] = None
    dropped_associations: int = 0

    def __len__(self):
        return len(self.frames)

    def load_frame(self, i) -> Tuple[float, np.ndarray, np.ndarray]:
        """(timestamp, gray uint8, raw depth) for frame i.

        Raw depth units convert to meters via intrinsics.depth_scale.
        """
        fr = self.frames[i]
        rgb = fr.rgb
        if isinstance(rgb, str):
            rgb = np.asarray(Image.open(rgb).convert("L"))
        depth = fr.depth
        if isinstance(depth, str):
            depth = np.asarray(Image.open(depth))
        return fr.timestamp, rgb, depth

    def imu_between(self, t0: float, t1: float):
        """IMU samples with t0 < t <= t1 (plus one sample before t0 so the
        interval is fully covered); None when no IMU stream exists."""
        if self.imu is None:
            return None
        ts = self.imu["timestamps"]
        i0 = int(np.searchsorted(ts, t0, side="right"))
        i0 = max(0, i0 - 1)
        i1 = int(np.searchsorted(ts, t1, side="right"))
        if i1 - i0 < 2:
            return None
        return (ts[i0:i1], self.imu["gyro"][i0:i1], self.imu["accel"][i0:i1])


def associate(times_a, times_b, max_offset: float = MAX_ASSOCIATION_OFFSET):
    """Greedy nearest-stamp association (symmetric in its arguments).

    Returns index pairs sorted by the first stream's order.
    """
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    cands = []
    for i, ta in enumerate(times_a):
        j0 = int(np.searchsorted(times_b, ta))
        for j in (j0 - 1, j0, j0 + 1):
            if 0 <= j < len(times_b):
                d = abs(ta - times_b[j])
                if d <= max_offset:
                    cands.append((d, i, j))
    cands.sort()
    used_a, used_b, pairs = set(), set(), []
    for d, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def _read_index_file(path):
    entries = []
    for ln, line in enumerate(open(path).readlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) < 2:
            raise ParseError(f"expected 'timestamp path' in {path}", ln)
        entries.append((float(parts[0]), parts[1]))
    return entries


def _read_intrinsics_file(path) -> CameraIntrinsics:
    vals = {}
    for line in open(path).readlines():
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, _, val = s.partition("=")
        vals[key.strip()] = float(val.strip())
    return CameraIntrinsics(fx=vals["fx"], fy=vals["fy"], cx=vals["cx"],
                            cy=vals["cy"], width=int(vals["width"]),
                            height=int(vals["height"]),
                            depth_scale=vals.get("depth_scale", TUM_DEPTH_SCALE))


def load_tum_sequence(seq_dir, max_offset: float = MAX_ASSOCIATION_OFFSET
                      ) -> SequenceManifest:
    """Load a TUM-layout directory: rgb.txt and depth.txt are required;
    groundtruth.txt, imu.csv, legged.csv, intrinsics.txt are optional.

    RGB/depth stamps are associated to the nearest partner within
    ``max_offset`` seconds; unmatched frames are dropped and counted.
    """
    seq_dir = str(seq_dir)
    rgb_index = os.path.join(seq_dir, "rgb.txt")
    depth_index = os.path.join(seq_dir, "depth.txt")
    for p in (rgb_index, depth_index):
        if not os.path.exists(p):
            raise MissingIndexFile(p)
    rgb = _read_index_file(rgb_index)
    depth = _read_index_file(depth_index)
    pairs = associate([t for t, _ in rgb], [t for t, _ in depth], max_offset)
    if not pairs:
        raise NoAssociations("no rgb/depth pairs within the offset tolerance")
    frames = [FrameRef(timestamp=rgb[i][0],
                       rgb=os.path.join(seq_dir, rgb[i][1]),
                       depth=os.path.join(seq_dir, depth[j][1]))
              for i, j in pairs]
    for fr in frames:
        for p in (fr.rgb, fr.depth):
            if not os.path.exists(p):
                raise MissingIndexFile(p)
    dropped = (len(rgb) - len(pairs)) + (len(depth) - len(pairs))

    intr_path = os.path.join(seq_dir, "intrinsics.txt")
    if os.path.exists(intr_path):
        intrinsics = _read_intrinsics_file(intr_path)
    else:
        intrinsics = CameraIntrinsics(**TUM_DEFAULT_INTRINSICS)

    gt = None
    gt_path = os.path.join(seq_dir, "groundtruth.txt")
    if os.path.exists(gt_path):
        gt = read_trajectory(gt_path)

    imu = None
    imu_path = os.path.join(seq_dir, "imu.csv")
    if os.path.exists(imu_path):
        data = np.loadtxt(imu_path, delimiter=",", comments="#", ndmin=2)
        imu = {"timestamps": data[:, 0], "gyro": data[:, 1:4],
               "accel": data[:, 4:7]}

    legged = None
    legged_path = os.path.join(seq_dir, "legged.csv")
    if os.path.exists(legged_path):
        data = np.loadtxt(legged_path, delimiter=",", comments="#", ndmin=2)
        poses = [Se3Pose(q=np.array([r[7], r[4], r[5], r[6]]), t=r[1:4])
                 for r in data]
        legged = LeggedOdometry(data[:, 0], poses)

    return SequenceManifest(intrinsics=intrinsics, frames=frames,
                            groundtruth=gt, imu=imu, legged=legged,
                            dropped_associations=dropped)


def write_sequence(manifest: SequenceManifest, out_dir,
                   depth_scale: float = TUM_DEPTH_SCALE):
    """Write a manifest to disk in TUM layout (16-bit depth PNGs)."""
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    rgb_lines, depth_lines = [], []
    for i in range(len(manifest)):
        t, gray, depth_raw = manifest.load_frame(i)
        depth_m = np.asarray(depth_raw, dtype=float) / manifest.intrinsics.depth_scale
        name = f"{t:.6f}.png"
        Image.fromarray(np.asarray(gray, dtype=np.uint8), mode="L").save(
            os.path.join(out_dir, "rgb", name))
        d16 = np.clip(depth_m * depth_scale, 0, 65535).astype(np.uint16)
        Image.fromarray(d16, mode="I;16").save(os.path.join(out_dir, "depth", name))
        rgb_lines.append(f"{t:.6f} rgb/{name}\n")
        depth_lines.append(f"{t:.6f} depth/{name}\n")
    with open(os.path.join(out_dir, "rgb.txt"), "w") as f:
        f.write("# timestamp filename\n")
        f.writelines(rgb_lines)
    with open(os.path.join(out_dir, "depth.txt"), "w") as f:
        f.write("# timestamp filename\n")
        f.writelines(depth_lines)
    k = manifest.intrinsics
    with open(os.path.join(out_dir, "intrinsics.txt"), "w") as f:
        f.write(f"fx = {k.fx}\nfy = {k.fy}\ncx = {k.cx}\ncy = {k.cy}\n"
                f"width = {k.width}\nheight = {k.height}\n"
                f"depth_scale = {depth_scale}\n")
    if manifest.groundtruth is not None:
        write_trajectory(manifest.groundtruth, os.path.join(out_dir, "groundtruth.txt"))
    if manifest.imu is not None:
        rows = np.column_stack([manifest.imu["timestamps"],
                                manifest.imu["gyro"], manifest.imu["accel"]])
        np.savetxt(os.path.join(out_dir, "imu.csv"), rows, delimiter=",",
                   header="timestamp,wx,wy,wz,ax,ay,az", fmt="%.9f")
    if manifest.legged is not None:
        rows = []
        for t, pose in zip(manifest.legged.timestamps, manifest.legged.poses):
            w, x, y, z = pose.q
            rows.append([t, *pose.t, x, y, z, w])
        np.savetxt(os.path.join(out_dir, "legged.csv"), np.asarray(rows),
                   delimiter=",", header="timestamp,tx,ty,tz,qx,qy,qz,qw",
                   fmt="%.9f")

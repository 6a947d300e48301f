"""Planar feature extraction from depth images.

A depth image is unprojected to a camera-frame cloud, binned into an M x N
angular grid (horizontal angle alpha = arctan(X/Z), vertical angle
theta = arctan(Y/Z); the camera optical axis plays the role of the forward
axis), and within each cell the points closest to the cell's geometric
center relative to their range ("smoothness") are kept as plane feature
candidates.  Local planes are fitted over k-nearest neighbors of a submap
with PCA for the point-to-plane residuals of the back-end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DEFAULT_MAX_DEPTH, DEFAULT_MIN_DEPTH, CameraIntrinsics


class EmptyCloud(ValueError):
    """Depth image contained no valid depths."""


class OutOfFov(ValueError):
    """Point falls outside the configured angular field of view."""


class InsufficientNeighbors(ValueError):
    """Submap holds fewer points than the requested neighbor count."""


@dataclass
class PlaneFeatureCloud:
    """Downsampled planar points from one depth image, camera frame, meters."""

    points: np.ndarray              # (N, 3)
    smoothness: np.ndarray          # (N,)
    frame_id: int = -1
    timestamp: float = 0.0

    def __len__(self):
        return len(self.points)


@dataclass
class FittedPlane:
    normal: np.ndarray              # unit 3-vector, world frame
    centroid: np.ndarray            # (3,), world frame
    planarity: float                # smallest/middle eigenvalue ratio
    k_used: int
    valid: bool = True


def depth_to_cloud(depth, k: CameraIntrinsics, stride: int = 1,
                   min_depth: float = DEFAULT_MIN_DEPTH,
                   max_depth: float = DEFAULT_MAX_DEPTH):
    """Unproject the valid-depth pixels of a stride-sampled grid.

    Raw depth units are converted to meters via ``k.depth_scale``.  Pixels
    with zero or out-of-range depth are skipped.  Returns an (N, 3) array.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    depth = np.asarray(depth)
    z = depth[::stride, ::stride].astype(float) / k.depth_scale
    vv, uu = np.mgrid[0:depth.shape[0]:stride, 0:depth.shape[1]:stride]
    valid = (z > min_depth) & (z < max_depth)
    if not valid.any():
        raise EmptyCloud("no valid depths in image")
    z = z[valid]
    u = uu[valid].astype(float)
    v = vv[valid].astype(float)
    return np.stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z], axis=1)


def fov_bounds_from_intrinsics(k: CameraIntrinsics, margin: float = 0.02):
    """(alpha_min, alpha_max, theta_min, theta_max) covering the image."""
    ha, va = k.half_fov()
    return (-ha - margin, ha + margin, -va - margin, va + margin)


def angular_cell_indices(points, fov_bounds, M: int, N: int):
    """Vectorized cell lookup: returns (rows, cols, in_fov_mask).

    alpha = arctan(X/Z) selects the column, theta = arctan(Y/Z) the row;
    angles exactly on the upper bound land in the last cell.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    amin, amax, tmin, tmax = fov_bounds
    alpha = np.arctan2(points[:, 0], points[:, 2])
    theta = np.arctan2(points[:, 1], points[:, 2])
    ok = (points[:, 2] > 0) & (alpha >= amin) & (alpha <= amax) \
        & (theta >= tmin) & (theta <= tmax)
    cols = np.minimum((alpha - amin) / (amax - amin) * N, N - 1).astype(int)
    rows = np.minimum((theta - tmin) / (tmax - tmin) * M, M - 1).astype(int)
    return rows, cols, ok


def angular_cell_index(p, fov_bounds, M: int, N: int):
    """Cell (row, col) of a single point; raises OutOfFov outside the bounds."""
    rows, cols, ok = angular_cell_indices(np.asarray(p, dtype=float)[None, :],
                                          fov_bounds, M, N)
    if not ok[0]:
        raise OutOfFov(f"point {p} outside fov bounds {fov_bounds}")
    return int(rows[0]), int(cols[0])


def extract_plane_points(cloud, M: int = 16, N: int = 24,
                         smoothness_threshold: float = 0.05,
                         max_per_cell: int = 2,
                         fov_bounds=None,
                         k: Optional[CameraIntrinsics] = None,
                         min_cell_points: int = 3,
                         frame_id: int = -1,
                         timestamp: float = 0.0) -> PlaneFeatureCloud:
    """Select low-smoothness points per angular cell.

    Smoothness of a point p_i within its cell is
    ``|sum_j (p_j - p_i)| / (n * |p_i|)  ==  |mean - p_i| / |p_i|``;
    the <= max_per_cell lowest-smoothness points below the threshold are
    emitted per cell.  Cells with fewer than ``min_cell_points`` members are
    skipped (smoothness is undefined there).  Output order is deterministic:
    cells scanned row-major, ties broken by input index.
    """
    cloud = np.asarray(cloud, dtype=float)
    if len(cloud) == 0:
        raise EmptyCloud("empty input cloud")
    if fov_bounds is None:
        if k is None:
            raise ValueError("need fov_bounds or intrinsics")
        fov_bounds = fov_bounds_from_intrinsics(k)
    rows, cols, ok = angular_cell_indices(cloud, fov_bounds, M, N)
    cell = rows * N + cols
    cell = np.where(ok, cell, -1)

    order = np.argsort(cell, kind="stable")
    sorted_cells = cell[order]
    sel_points, sel_scores = [], []
    start = np.searchsorted(sorted_cells, 0)  # skip out-of-fov block
    boundaries = np.flatnonzero(np.diff(sorted_cells[start:])) + start + 1
    groups = np.split(order[start:], boundaries - start)
    for idx in groups:
        if len(idx) < min_cell_points:
            continue
        pts = cloud[idx]
        center = pts.mean(axis=0)
        score = np.linalg.norm(pts - center, axis=1) / np.linalg.norm(pts, axis=1)
        keep = np.lexsort((idx, score))[:max_per_cell]
        keep = keep[score[keep] < smoothness_threshold]
        sel_points.append(pts[keep])
        sel_scores.append(score[keep])
    if sel_points:
        points = np.concatenate(sel_points)
        scores = np.concatenate(sel_scores)
    else:
        points = np.zeros((0, 3))
        scores = np.zeros(0)
    return PlaneFeatureCloud(points=points, smoothness=scores,
                             frame_id=frame_id, timestamp=timestamp)


@dataclass
class SubmapIndex:
    """Immutable nearest-neighbor index over world-frame plane points."""

    points: np.ndarray                       # (N, 3) world frame
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tree: cKDTree = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.tree is None and len(self.points):
            self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)


def fit_plane_knn(query, index: SubmapIndex, k: int = 10,
                  planarity_threshold: float = 0.1,
                  radius_cap: float = 0.5) -> FittedPlane:
    """PCA plane over the k nearest submap neighbors of ``query``.

    The normal is the smallest-eigenvalue eigenvector, sign flipped toward
    the index's viewing origin.  Invalid when the neighborhood is too spread
    out (max neighbor distance > radius_cap) or not planar enough
    (smallest/middle eigenvalue ratio >= planarity_threshold).
    """
    if len(index) < k:
        raise InsufficientNeighbors(f"submap has {len(index)} < k={k} points")
    query = np.asarray(query, dtype=float)
    dists, nn = index.tree.query(query, k=k)
    dists = np.atleast_1d(dists)
    pts = index.points[np.atleast_1d(nn)]
    centroid = pts.mean(axis=0)
    if dists.max() > radius_cap:
        return FittedPlane(np.array([0.0, 0.0, 1.0]), centroid, np.inf, k, valid=False)
    d = pts - centroid
    cov = d.T @ d / len(pts)
    w, V = np.linalg.eigh(cov)
    if w[1] <= 1e-12:  # collinear or degenerate neighborhood
        return FittedPlane(np.array([0.0, 0.0, 1.0]), centroid, np.inf, k, valid=False)
    planarity = float(w[0] / w[1])
    normal = V[:, 0]
    if normal @ (index.origin - centroid) < 0:
        normal = -normal
    return FittedPlane(normal, centroid, planarity, k,
                       valid=planarity < planarity_threshold)


def write_ply(points, path):
    """ASCII PLY with x y z vertex fields, meters."""
    points = np.asarray(points, dtype=float)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("end_header\n")
        for p in points:
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def read_ply(path):
    points = []
    with open(path) as f:
        header = True
        for line in f:
            if header:
                if line.strip() == "end_header":
                    header = False
                continue
            parts = line.split()
            if len(parts) >= 3:
                points.append([float(parts[0]), float(parts[1]), float(parts[2])])
    return np.asarray(points, dtype=float).reshape(-1, 3)

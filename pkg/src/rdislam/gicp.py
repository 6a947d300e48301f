"""Generalized-ICP alignment of plane-feature clouds.

Each point carries a plane-regularized covariance (eigenvalues forced to
(eps, 1, 1) in the local PCA basis); alignment minimizes the
distribution-to-distribution cost

    sum_i  d_i' (C_target_i + R C_source_i R')^-1 d_i,
    d_i = T source_i - target_i

by Gauss-Newton over SE(3) with left-multiplicative updates and single
nearest-neighbor correspondences recomputed every iteration.  The returned
6x6 Hessian at the solution doubles as an information estimate for the
factor-graph relative-pose constraint; near-degenerate geometry (long
corridors, single planes) is flagged instead of trusted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Se3Pose, se3_exp, skew


class InsufficientPoints(ValueError):
    pass


class TooFewCorrespondences(RuntimeError):
    pass


@dataclass
class CovariancePointCloud:
    """Points plus their plane-regularized 3x3 covariances."""

    points: np.ndarray        # (N, 3)
    covariances: np.ndarray   # (N, 3, 3)
    tree: Optional[cKDTree] = None

    def __post_init__(self):
        if self.tree is None:
            self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)


@dataclass
class GicpResult:
    relative_pose: Se3Pose        # maps source frame into target frame
    converged: bool
    iterations: int
    final_cost: float
    num_correspondences: int
    information: np.ndarray      # 6x6 Gauss-Newton Hessian at the solution
    weakly_constrained: bool = False
    cost_trace: list = field(default_factory=list)


def estimate_point_covariances(points, k: int = 10,
                               epsilon: float = 1e-3) -> CovariancePointCloud:
    """Per-point k-NN PCA covariances with eigenvalues clamped to (eps, 1, 1).

    The clamping is unconditional: only the eigenbasis (i.e. the local
    surface orientation) survives from the data.
    """
    points = np.asarray(points, dtype=float)
    if len(points) < k:
        raise InsufficientPoints(f"cloud has {len(points)} < k={k} points")
    tree = cKDTree(points)
    _, nn = tree.query(points, k=k)
    neigh = points[nn]                      # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    covs = np.einsum("nki,nkj->nij", centered, centered) / k
    w, V = np.linalg.eigh(covs)             # ascending eigenvalues
    lam = np.tile(np.array([epsilon, 1.0, 1.0]), (len(points), 1))
    regularized = np.einsum("nij,nj,nkj->nik", V, lam, V)
    return CovariancePointCloud(points=points, covariances=regularized, tree=tree)


def gicp_align(source: CovariancePointCloud, target: CovariancePointCloud,
               T_init: Optional[Se3Pose] = None, max_iters: int = 30,
               correspondence_radius: float = 0.5, tolerance: float = 1e-6,
               min_correspondences: int = 10,
               condition_limit: float = 1e6) -> GicpResult:
    """Align source onto target; T_init maps source coordinates into target.

    Raises TooFewCorrespondences when fewer than ``min_correspondences``
    source points find a neighbor within the radius.  A non-converged run
    still returns its best estimate, flagged.
    """
    if len(source) < 20 or len(target) < 20:
        raise InsufficientPoints("both clouds must hold at least 20 points")
    T = (T_init or Se3Pose.identity()).copy()
    src = source.points
    cost_trace = []
    converged = False
    iterations = 0
    n_corr = 0
    H = np.eye(6)
    prev_cost = None

    for iterations in range(1, max_iters + 1):
        R = T.rotation_matrix()
        moved = src @ R.T + T.t
        dists, nn = target.tree.query(moved, distance_upper_bound=correspondence_radius)
        ok = np.isfinite(dists)
        n_corr = int(ok.sum())
        if n_corr < min_correspondences:
            raise TooFewCorrespondences(
                f"{n_corr} correspondences within {correspondence_radius} m")
        p = moved[ok]
        q = target.points[nn[ok]]
        Cs = source.covariances[ok]
        Ct = target.covariances[nn[ok]]
        M = np.linalg.inv(Ct + np.einsum("ij,njk,lk->nil", R, Cs, R))
        d = p - q
        cost = float(np.einsum("ni,nij,nj->", d, M, d))
        cost_trace.append(cost)

        # J_i = d d_i / d xi = [I, -p_i^] under T <- Exp(xi) T
        Md = np.einsum("nij,nj->ni", M, d)
        H = np.zeros((6, 6))
        b = np.zeros(6)
        px = np.zeros((len(p), 3, 3))
        px[:, 0, 1] = -p[:, 2]
        px[:, 0, 2] = p[:, 1]
        px[:, 1, 0] = p[:, 2]
        px[:, 1, 2] = -p[:, 0]
        px[:, 2, 0] = -p[:, 1]
        px[:, 2, 1] = p[:, 0]
        J = np.concatenate([np.tile(np.eye(3), (len(p), 1, 1)), -px], axis=2)
        MJ = np.einsum("nij,njk->nik", M, J)
        H = np.einsum("nji,njk->ik", J, MJ)
        b = np.einsum("nji,nj->i", J, Md)

        delta = np.linalg.solve(H + 1e-12 * np.eye(6), -b)
        # backtracking keeps the accepted cost trace non-increasing
        step = 1.0
        for _ in range(8):
            T_new = se3_exp(step * delta).compose(T)
            Rn = T_new.rotation_matrix()
            pn = src[ok] @ Rn.T + T_new.t
            dn = pn - q
            Mn = np.linalg.inv(Ct + np.einsum("ij,njk,lk->nil", Rn, Cs, Rn))
            cost_new = float(np.einsum("ni,nij,nj->", dn, Mn, dn))
            if cost_new <= cost + 1e-15:
                break
            step *= 0.5
        T = se3_exp(step * delta).compose(T)
        if np.linalg.norm(step * delta) < tolerance:
            converged = True
            break
        prev_cost = cost

    svals = np.linalg.svd(H, compute_uv=False)
    weak = bool(svals[0] / max(svals[-1], 1e-300) > condition_limit)
    return GicpResult(relative_pose=T, converged=converged, iterations=iterations,
                      final_cost=cost_trace[-1] if cost_trace else 0.0,
                      num_correspondences=n_corr, information=H,
                      weakly_constrained=weak, cost_trace=cost_trace)

"""Feature detection and dual-stream optical flow tracking.

Tracking is purely flow-based.  Features with a qualified map point are
tracked 3D-to-2D: the map point is projected with the predicted current pose
and the projection seeds the pyramidal Lucas-Kanade search, which keeps
tracking alive under displacements far beyond the plain LK search range.
Remaining features fall through to a 2D-to-2D stream seeded at their
previous pixel.  The union of tracked points is filtered with a
fundamental-matrix RANSAC, and inlier grid cells are masked so re-detection
does not stack new features onto tracked ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, Se3Pose

STATUS_LOST = 0
STATUS_TRACKED = 1
STATUS_OUTLIER = 2

STREAM_NONE = 0
STREAM_3D2D = 1
STREAM_2D2D = 2


class TooSmall(ValueError):
    """Image too small for the requested pyramid depth."""


class TrackingLost(RuntimeError):
    """Fewer tracked inliers than the configured minimum."""


class DegenerateConfig(RuntimeError):
    """All fundamental-matrix candidates degenerate on incoherent flow."""


@dataclass
class FlowConfig:
    window: int = 21
    levels: int = 4
    max_iters: int = 30
    eps: float = 0.01                 # convergence threshold, pixels
    fb_threshold: float = 1.0         # forward-backward rejection, pixels
    sampson_threshold: float = 1.5    # fundamental RANSAC inlier gate, pixels
    ransac_iters: int = 200
    min_tracked: int = 15
    margin: int = 8                   # border margin for seed qualification
    max_seed_displacement: float = 120.0
    grid_cell: int = 31               # detection bucketing cell, pixels
    max_features: int = 250
    min_corner_score: float = 40.0    # Shi-Tomasi gate
    fast_threshold: float = 12.0
    fast_arc: int = 9
    features_per_cell: int = 2


@dataclass
class Feature:
    pixel: np.ndarray
    level: int = 0
    map_point_id: int = -1
    track_length: int = 1
    score: float = 0.0


@dataclass
class TrackResult:
    points: np.ndarray      # (N, 2) tracked pixels in the current frame
    status: np.ndarray      # (N,) STATUS_* codes
    stream: np.ndarray      # (N,) STREAM_* tags
    fb_error: np.ndarray    # (N,) forward-backward error, pixels
    fundamental: Optional[np.ndarray] = None
    filter_passthrough: bool = False

    def tracked_mask(self):
        return self.status == STATUS_TRACKED


# ---------------------------------------------------------------------------
# pyramids
# ---------------------------------------------------------------------------

@dataclass
class ImagePyramid:
    levels: list            # float32 images, scale factor 2 between levels
    _grads: dict = field(default_factory=dict, repr=False)

    @property
    def num_levels(self):
        return len(self.levels)

    def gradients(self, level: int):
        """Cached Scharr x/y gradients of one level."""
        if level not in self._grads:
            img = self.levels[level]
            kx = np.array([[-3, 0, 3], [-10, 0, 10], [-3, 0, 3]], dtype=np.float32) / 32.0
            gx = ndimage.correlate(img, kx, mode="nearest")
            gy = ndimage.correlate(img, kx.T, mode="nearest")
            self._grads[level] = (gx, gy)
        return self._grads[level]


def build_pyramid(image, levels: int = 4, min_size: int = 16) -> ImagePyramid:
    """Box-filtered 2x2 downsampling chain; level l is floor(level0 / 2^l)."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError("expected a single-channel image")
    top_h, top_w = img.shape[0] // 2 ** (levels - 1), img.shape[1] // 2 ** (levels - 1)
    if min(top_h, top_w) < min_size:
        raise TooSmall(
            f"{img.shape} cannot support {levels} levels with min size {min_size}")
    lv = [img]
    for _ in range(levels - 1):
        prev = lv[-1]
        h2, w2 = prev.shape[0] // 2, prev.shape[1] // 2
        c = prev[: 2 * h2, : 2 * w2]
        lv.append(0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2]))
    return ImagePyramid(levels=lv)


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

_FAST_RING = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])  # (dx, dy), clockwise Bresenham circle of radius 3


def _fast_corner_mask(img, threshold, arc_min):
    h, w = img.shape
    if h <= 6 or w <= 6:
        return np.zeros((h, w), dtype=bool)
    center = img[3:h - 3, 3:w - 3]
    brighter = np.empty((16,) + center.shape, dtype=bool)
    darker = np.empty_like(brighter)
    for i, (dx, dy) in enumerate(_FAST_RING):
        ring = img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx]
        brighter[i] = ring > center + threshold
        darker[i] = ring < center - threshold
    mask = np.zeros((h, w), dtype=bool)
    for flags in (brighter, darker):
        run = np.zeros(center.shape, dtype=np.int16)
        best = np.zeros(center.shape, dtype=np.int16)
        for i in range(16 + arc_min - 1):
            f = flags[i % 16]
            run = (run + 1) * f
            np.maximum(best, run, out=best)
        mask[3:h - 3, 3:w - 3] |= best >= arc_min
    return mask


def shi_tomasi_response(img):
    """Min-eigenvalue corner response of the gradient structure tensor."""
    img = np.asarray(img, dtype=np.float32)
    kx = np.array([[-3, 0, 3], [-10, 0, 10], [-3, 0, 3]], dtype=np.float32) / 32.0
    gx = ndimage.correlate(img, kx, mode="nearest")
    gy = ndimage.correlate(img, kx.T, mode="nearest")
    sxx = ndimage.uniform_filter(gx * gx, 3)
    syy = ndimage.uniform_filter(gy * gy, 3)
    sxy = ndimage.uniform_filter(gx * gy, 3)
    tr = sxx + syy
    det = np.sqrt(np.maximum((sxx - syy) ** 2 + 4 * sxy * sxy, 0.0))
    return 0.5 * (tr - det)


def mask_from_points(points, shape, cell: int):
    """Boolean mask with the grid cell of every point filled."""
    mask = np.zeros(shape, dtype=bool)
    for u, v in np.atleast_2d(points):
        if not (0 <= u < shape[1] and 0 <= v < shape[0]):
            continue
        r0 = int(v // cell) * cell
        c0 = int(u // cell) * cell
        mask[r0:r0 + cell, c0:c0 + cell] = True
    return mask


def detect_features(image, config: FlowConfig = None, mask=None):
    """FAST corners ranked by Shi-Tomasi score, bucketed per grid cell.

    Grid cells with any masked pixel emit nothing.  Returns a list of
    Feature; empty on blank images or a full mask.
    """
    cfg = config or FlowConfig()
    img = np.asarray(image, dtype=np.float32)
    corner = _fast_corner_mask(img, cfg.fast_threshold, cfg.fast_arc)
    if not corner.any():
        return []
    score = shi_tomasi_response(img)
    # local non-max suppression among candidates
    local_max = score >= ndimage.maximum_filter(score, size=3)
    corner &= local_max & (score > cfg.min_corner_score)
    vs, us = np.nonzero(corner)
    if len(us) == 0:
        return []
    cell = cfg.grid_cell
    cells = (vs // cell).astype(np.int64) * ((img.shape[1] // cell) + 1) + us // cell
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    feats = []
    order = np.lexsort((us + vs, -score[vs, us], cells))
    prev_cell, in_cell = -1, 0
    for idx in order:
        c = cells[idx]
        if mask is not None:
            r0, c0 = (vs[idx] // cell) * cell, (us[idx] // cell) * cell
            if mask[r0:r0 + cell, c0:c0 + cell].any():
                continue
        if c != prev_cell:
            prev_cell, in_cell = c, 0
        if in_cell >= cfg.features_per_cell:
            continue
        in_cell += 1
        feats.append(Feature(pixel=np.array([us[idx], vs[idx]], dtype=float),
                             score=float(score[vs[idx], us[idx]])))
    feats.sort(key=lambda f: -f.score)
    return feats[: cfg.max_features]


# ---------------------------------------------------------------------------
# pyramidal Lucas-Kanade
# ---------------------------------------------------------------------------

def _bilinear(img, x, y):
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = x - x0
    fy = y - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    return (i00 * (1 - fx) * (1 - fy) + i01 * fx * (1 - fy)
            + i10 * (1 - fx) * fy + i11 * fx * fy)


def _patch_coords(centers, half):
    off = np.arange(-half, half + 1, dtype=float)
    ox, oy = np.meshgrid(off, off)
    xs = centers[:, 0][:, None, None] + ox[None]
    ys = centers[:, 1][:, None, None] + oy[None]
    return xs, ys


def _in_bounds(xs, ys, shape):
    return ((xs.min(axis=(1, 2)) >= 0) & (ys.min(axis=(1, 2)) >= 0)
            & (xs.max(axis=(1, 2)) <= shape[1] - 2)
            & (ys.max(axis=(1, 2)) <= shape[0] - 2))


def lk_track(prev: ImagePyramid, cur: ImagePyramid, points, seeds=None,
             window: int = 21, max_iters: int = 30, eps: float = 0.01,
             fb_threshold: Optional[float] = 1.0):
    """Coarse-to-fine iterative LK from ``seeds`` (defaults to the points).

    Forward-additive iterations with template gradients; a point converges
    when its update norm drops below ``eps``.  Tracked points are re-tracked
    back into ``prev`` and rejected if the round trip misses by more than
    ``fb_threshold`` pixels (skipped when ``fb_threshold`` is None).
    """
    assert window % 2 == 1, "window must be odd"
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    if n == 0:
        return TrackResult(points=np.zeros((0, 2)), status=np.zeros(0, dtype=np.int8),
                           stream=np.zeros(0, dtype=np.int8), fb_error=np.zeros(0))
    seeds = points if seeds is None else np.atleast_2d(np.asarray(seeds, dtype=float))
    assert len(seeds) == n, "seeds and points must align"

    flow, alive = _lk_pyramid(prev, cur, points, seeds - points,
                              window, max_iters, eps)
    tracked = points + flow
    status = np.where(alive, STATUS_TRACKED, STATUS_LOST).astype(np.int8)
    fb_err = np.full(n, np.inf)
    if fb_threshold is not None and alive.any():
        idx = np.flatnonzero(alive)
        back_flow, back_alive = _lk_pyramid(cur, prev, tracked[idx],
                                            -flow[idx], window, max_iters, eps)
        err = np.linalg.norm(tracked[idx] + back_flow - points[idx], axis=1)
        err[~back_alive] = np.inf
        fb_err[idx] = err
        bad = idx[err > fb_threshold]
        status[bad] = STATUS_LOST
    elif fb_threshold is None:
        fb_err[alive] = 0.0
    return TrackResult(points=tracked, status=status,
                       stream=np.zeros(n, dtype=np.int8), fb_error=fb_err)


def _lk_pyramid(prev, cur, points, init_flow, window, max_iters, eps):
    n = len(points)
    L = min(prev.num_levels, cur.num_levels)
    half = window // 2
    flow = init_flow / 2.0 ** (L - 1)
    alive = np.ones(n, dtype=bool)

    for level in range(L - 1, -1, -1):
        s = 2.0 ** level
        img_p = prev.levels[level]
        img_c = cur.levels[level]
        gx, gy = prev.gradients(level)

        xs, ys = _patch_coords(points / s, half)
        inb = _in_bounds(xs, ys, img_p.shape)
        if level == 0:
            alive &= inb  # untrackable at full resolution
        proc = alive & inb
        if proc.any():
            tmpl = np.zeros((n, window, window), dtype=np.float32)
            tgx = np.zeros_like(tmpl)
            tgy = np.zeros_like(tmpl)
            tmpl[proc] = _bilinear(img_p, xs[proc], ys[proc])
            tgx[proc] = _bilinear(gx, xs[proc], ys[proc])
            tgy[proc] = _bilinear(gy, xs[proc], ys[proc])
            gxx = (tgx * tgx).sum(axis=(1, 2))
            gyy = (tgy * tgy).sum(axis=(1, 2))
            gxy = (tgx * tgy).sum(axis=(1, 2))
            det = gxx * gyy - gxy * gxy
            flat = proc & (det <= 1e-6)  # textureless template
            alive &= ~flat
            proc &= ~flat

            active = np.flatnonzero(proc)
            for _ in range(max_iters):
                if len(active) == 0:
                    break
                cx = xs[active] + flow[active, 0][:, None, None]
                cy = ys[active] + flow[active, 1][:, None, None]
                ib = _in_bounds(cx, cy, img_c.shape)
                if not ib.all():
                    # out of the search image: fatal at full resolution,
                    # frozen (carried to the finer level) otherwise
                    if level == 0:
                        alive[active[~ib]] = False
                    active = active[ib]
                    cx, cy = cx[ib], cy[ib]
                    if len(active) == 0:
                        break
                diff = _bilinear(img_c, cx, cy) - tmpl[active]
                bx = (diff * tgx[active]).sum(axis=(1, 2))
                by = (diff * tgy[active]).sum(axis=(1, 2))
                d = det[active]
                dx = -(gyy[active] * bx - gxy[active] * by) / d
                dy = -(-gxy[active] * bx + gxx[active] * by) / d
                flow[active, 0] += dx
                flow[active, 1] += dy
                step = np.hypot(dx, dy)
                active = active[step >= eps]
        if level > 0:
            flow = flow * 2.0
    # final position must land inside the image
    final = points + flow
    h0, w0 = cur.levels[0].shape
    alive &= (final[:, 0] >= 0) & (final[:, 0] <= w0 - 2) \
        & (final[:, 1] >= 0) & (final[:, 1] <= h0 - 2)
    return flow, alive


# ---------------------------------------------------------------------------
# map-point reprojection seeding
# ---------------------------------------------------------------------------

def reproject_map_points(map_positions, prev_pixels, T_pred: Se3Pose,
                         k: CameraIntrinsics,
                         min_depth: float = 0.05, max_depth: float = 10.0,
                         margin: int = 8, max_seed_displacement: float = 120.0):
    """Seed pixels for map-point features under the predicted pose.

    ``map_positions`` are world-frame points (rows of NaN for features
    without a map point), ``T_pred`` is the predicted world-from-camera
    pose.  A seed is qualified when the projected depth lies in
    [min_depth, max_depth], the pixel is in bounds with ``margin``, and the
    displacement from the previous pixel is below ``max_seed_displacement``.
    """
    map_positions = np.atleast_2d(np.asarray(map_positions, dtype=float))
    prev_pixels = np.atleast_2d(np.asarray(prev_pixels, dtype=float))
    n = len(map_positions)
    seeds = prev_pixels.copy()
    qualified = np.zeros(n, dtype=bool)
    has_point = np.isfinite(map_positions).all(axis=1)
    if not has_point.any():
        return seeds, qualified
    T_c_w = T_pred.inverse()
    cam = T_c_w.transform(map_positions[has_point])
    z = cam[:, 2]
    good_z = (z > min_depth) & (z < max_depth)
    zs = np.where(good_z, z, 1.0)
    u = k.fx * cam[:, 0] / zs + k.cx
    v = k.fy * cam[:, 1] / zs + k.cy
    uv = np.stack([u, v], axis=1)
    inb = (u >= margin) & (u <= k.width - 1 - margin) \
        & (v >= margin) & (v <= k.height - 1 - margin)
    disp = np.linalg.norm(uv - prev_pixels[has_point], axis=1)
    ok = good_z & inb & (disp < max_seed_displacement)
    idx = np.flatnonzero(has_point)
    seeds[idx[ok]] = uv[ok]
    qualified[idx[ok]] = True
    return seeds, qualified


# ---------------------------------------------------------------------------
# fundamental-matrix outlier rejection
# ---------------------------------------------------------------------------

def _normalize_points(pts):
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (pts - c) * s, T

def _eight_point(p1, p2):
    n1, T1 = _normalize_points(p1)
    n2, T2 = _normalize_points(p2)
    A = np.column_stack([
        n2[:, 0] * n1[:, 0], n2[:, 0] * n1[:, 1], n2[:, 0],
        n2[:, 1] * n1[:, 0], n2[:, 1] * n1[:, 1], n2[:, 1],
        n1[:, 0], n1[:, 1], np.ones(len(n1)),
    ])
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(F)
    F = U @ np.diag([S[0], S[1], 0.0]) @ Vt
    F = T2.T @ F @ T1
    nrm = np.linalg.norm(F)
    return F / nrm if nrm > 0 else F

def sampson_distance(F, p1, p2):
    x1 = np.column_stack([p1, np.ones(len(p1))])
    x2 = np.column_stack([p2, np.ones(len(p2))])
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = np.einsum("ni,ni->n", x2, Fx1) ** 2
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return num / np.maximum(den, 1e-12)


@dataclass
class FundamentalFilterResult:
    inliers: np.ndarray
    fundamental: Optional[np.ndarray]
    passthrough: bool = False


def fundamental_ransac_filter(p1, p2, threshold: float = 1.5,
                              iters: int = 200, seed: int = 0,
                              min_model_ratio: float = 0.3) -> FundamentalFilterResult:
    """Normalized 8-point inside RANSAC; inlier iff Sampson distance < threshold.

    Fewer than 8 matches pass through with a warning flag.  When no model
    explains at least ``min_model_ratio`` of coherent flow the filter passes
    everything (homography-dominant, e.g. pure rotation); incoherent flow
    with no model raises DegenerateConfig.
    """
    p1 = np.atleast_2d(np.asarray(p1, dtype=float))
    p2 = np.atleast_2d(np.asarray(p2, dtype=float))
    n = len(p1)
    if n < 8:
        return FundamentalFilterResult(np.ones(n, dtype=bool), None, passthrough=True)
    rng = np.random.default_rng(seed)
    thresh2 = threshold * threshold
    best_count, best_inl = -1, None
    for _ in range(iters):
        pick = rng.choice(n, size=8, replace=False)
        try:
            F = _eight_point(p1[pick], p2[pick])
        except np.linalg.LinAlgError:
            continue
        inl = sampson_distance(F, p1, p2) < thresh2
        c = int(inl.sum())
        if c > best_count:
            best_count, best_inl = c, inl
    if best_count < max(8, int(min_model_ratio * n)):
        flows = p2 - p1
        med = np.median(flows, axis=0)
        spread = np.median(np.linalg.norm(flows - med, axis=1))
        if spread < max(1.5, 0.1 * np.linalg.norm(med)):
            # zero-parallax / rotation-dominant: epipolar geometry is
            # rank-degenerate, keep everything
            return FundamentalFilterResult(np.ones(n, dtype=bool), None,
                                           passthrough=True)
        raise DegenerateConfig("no fundamental model explains the matches")
    # refit on the best consensus set and classify once more
    F = _eight_point(p1[best_inl], p2[best_inl])
    inl = sampson_distance(F, p1, p2) < thresh2
    return FundamentalFilterResult(inl, F)


# ---------------------------------------------------------------------------
# dual-stream tracking
# ---------------------------------------------------------------------------

def dual_stream_track(prev_pyramid: ImagePyramid, cur_pyramid: ImagePyramid,
                      prev_pixels, map_positions, T_pred: Se3Pose,
                      k: CameraIntrinsics, config: FlowConfig = None,
                      min_depth: float = 0.05, max_depth: float = 10.0):
    """Track features from the previous frame with two LK streams.

    Stream 1 (3D-to-2D) tracks features whose map point reprojects
    admissibly under ``T_pred``, seeded at the reprojection.  Stream 2
    (2D-to-2D) tracks the rest from their previous pixels.  Survivors pass a
    fundamental-matrix RANSAC; raises TrackingLost when fewer than
    ``config.min_tracked`` inliers remain.
    """
    cfg = config or FlowConfig()
    prev_pixels = np.atleast_2d(np.asarray(prev_pixels, dtype=float))
    n = len(prev_pixels)
    if n == 0:
        raise TrackingLost("no features to track")
    seeds, qualified = reproject_map_points(
        map_positions, prev_pixels, T_pred, k,
        min_depth=min_depth, max_depth=max_depth,
        margin=cfg.margin, max_seed_displacement=cfg.max_seed_displacement)

    points = np.zeros((n, 2))
    status = np.zeros(n, dtype=np.int8)
    stream = np.where(qualified, STREAM_3D2D, STREAM_2D2D).astype(np.int8)
    fb = np.full(n, np.inf)

    for sel, use_seeds in ((qualified, True), (~qualified, False)):
        if not sel.any():
            continue
        res = lk_track(prev_pyramid, cur_pyramid, prev_pixels[sel],
                       seeds=seeds[sel] if use_seeds else None,
                       window=cfg.window, max_iters=cfg.max_iters,
                       eps=cfg.eps, fb_threshold=cfg.fb_threshold)
        points[sel] = res.points
        status[sel] = res.status
        fb[sel] = res.fb_error

    tracked = status == STATUS_TRACKED
    fres = FundamentalFilterResult(np.ones(int(tracked.sum()), dtype=bool), None, True)
    if tracked.sum() >= 8:
        fres = fundamental_ransac_filter(
            prev_pixels[tracked], points[tracked],
            threshold=cfg.sampson_threshold, iters=cfg.ransac_iters)
        out_idx = np.flatnonzero(tracked)[~fres.inliers]
        status[out_idx] = STATUS_OUTLIER
    if int((status == STATUS_TRACKED).sum()) < cfg.min_tracked:
        raise TrackingLost(
            f"{int((status == STATUS_TRACKED).sum())} inliers "
            f"< min_tracked={cfg.min_tracked}")
    return TrackResult(points=points, status=status, stream=stream, fb_error=fb,
                       fundamental=fres.fundamental,
                       filter_passthrough=fres.passthrough)

"""Flow, event and registration metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import DepthFrame, Intrinsics
from .geometry import OrientedPointCloud, SpatialIndex, as_points
from .topology import TopologyEvent
from .warp import DenseWarp


@dataclass
class Flow2D:
    """Per-pixel displacement ``flow[row, col] = (du, dv)`` in pixels."""

    flow: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise ValueError("flow must have shape (H, W, 2)")
        if self.valid.shape != self.flow.shape[:2]:
            raise ValueError("validity mask does not match the flow size")
        self.valid = self.valid & np.all(np.isfinite(self.flow), axis=2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.flow.shape[:2]


def warp_to_flow(pixel_points, valid, warp: DenseWarp, intrinsics: Intrinsics | None) -> Flow2D:
    """Optical flow induced by warping an organized point grid.

    ``pixel_points`` has shape ``(H, W, 3)``; ``warp`` is defined over the
    valid pixels in row-major order (the order of ``depth_to_cloud``).
    Pixels warped onto or behind the camera plane become invalid.
    """
    if intrinsics is None:
        raise ValueError("missing intrinsics")
    grid = np.asarray(pixel_points, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    h, w = valid.shape
    rows, cols = np.nonzero(valid)
    moved = warp.apply(grid[rows, cols])
    z = moved[:, 2]
    ahead = z > 0
    safe_z = np.where(ahead, z, 1.0)
    u = intrinsics.fx * moved[:, 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * moved[:, 1] / safe_z + intrinsics.cy
    flow = np.zeros((h, w, 2))
    flow[rows, cols, 0] = u - cols
    flow[rows, cols, 1] = v - rows
    out_valid = np.zeros((h, w), dtype=bool)
    out_valid[rows, cols] = ahead
    return Flow2D(flow, out_valid)


def frame_flow(frame: DepthFrame, warp: DenseWarp) -> Flow2D:
    grid = np.zeros(frame.depth.shape + (3,))
    if frame.intrinsics is not None:
        grid[frame.valid] = frame.points()
    return warp_to_flow(grid, frame.valid, warp, frame.intrinsics)


def _joint(est: Flow2D, gt: Flow2D) -> np.ndarray:
    if est.shape != gt.shape:
        raise ValueError("flow fields differ in size")
    joint = est.valid & gt.valid
    if not joint.any():
        raise ValueError("no jointly valid pixels")
    return joint


def epe(est: Flow2D, gt: Flow2D) -> tuple[np.ndarray, float]:
    """Endpoint error per pixel (NaN where not jointly valid) and its mean."""
    joint = _joint(est, gt)
    d = est.flow - gt.flow
    per = np.full(est.shape, np.nan)
    per[joint] = np.sqrt(d[joint, 0] ** 2 + d[joint, 1] ** 2)
    return per, float(per[joint].mean())


def ae(est: Flow2D, gt: Flow2D) -> tuple[np.ndarray, float]:
    """Angle in degrees between ``(u, v, 1)`` vectors of the two flows."""
    joint = _joint(est, gt)
    a, b = est.flow[joint], gt.flow[joint]
    num = a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1] + 1.0
    den = np.sqrt(a[:, 0] ** 2 + a[:, 1] ** 2 + 1.0) * np.sqrt(b[:, 0] ** 2 + b[:, 1] ** 2 + 1.0)
    ang = np.degrees(np.arccos(np.clip(num / den, -1.0, 1.0)))
    per = np.full(est.shape, np.nan)
    per[joint] = ang
    return per, float(ang.mean())


def flow_report(est: Flow2D, gt: Flow2D) -> dict:
    e, e_mean = epe(est, gt)
    a, a_mean = ae(est, gt)
    joint = ~np.isnan(e)
    return {"epe_mean": e_mean, "epe_median": float(np.median(e[joint])),
            "ae_mean": a_mean, "ae_median": float(np.median(a[joint])),
            "valid_pixels": int(joint.sum())}


def within_count(A, B, rho: float) -> int:
    """Number of points of ``A`` whose nearest neighbor in ``B`` is within ``rho``."""
    _, d = SpatialIndex(B).nearest_many(A)
    return int(np.count_nonzero(d <= rho))


def overlap_rho(X1, X2, rho: float = 0.03) -> float:
    A, B = as_points(X1, "X1"), as_points(X2, "X2")
    if len(A) == 0 or len(B) == 0:
        raise ValueError("empty point set")
    if not rho > 0:
        raise ValueError("rho must be positive")
    return (within_count(A, B, rho) + within_count(B, A, rho)) / (len(A) + len(B))


@dataclass
class EventMatchReport:
    """Statistics of the gt->det and det->gt overlap-maximizing mappings.

    ``mean_overlap`` / ``mean_delay`` refer to the gt->det mapping; means
    are 0 when nothing matched. Delay is ``t_gt - t_det``.
    """

    matched_fraction_gt: float
    matched_fraction_det: float
    mean_overlap: float
    mean_delay: float
    det_mean_overlap: float
    det_mean_delay: float
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    gt_to_det: list[int] = field(default_factory=list)
    det_to_gt: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "matched_fraction_gt": self.matched_fraction_gt,
            "matched_fraction_det": self.matched_fraction_det,
            "mean_overlap": self.mean_overlap,
            "mean_delay": self.mean_delay,
            "det_mean_overlap": self.det_mean_overlap,
            "det_mean_delay": self.det_mean_delay,
            "gt_to_det": list(self.gt_to_det),
            "det_to_gt": list(self.det_to_gt),
            "matches": [[i, j, o] for i, j, o in self.matches],
        }


def match_events(gt: list[TopologyEvent], det: list[TopologyEvent], rho: float = 0.03,
                 dt_max: float = 2, min_overlap: float = 0.2) -> EventMatchReport:
    """Pair events with equal labels, close timestamps and enough overlap.

    Each side maps to the partner of largest overlap; ties go to the lower
    index.
    """
    O = np.full((len(gt), len(det)), np.nan)
    matches = []
    for i, g in enumerate(gt):
        for j, d in enumerate(det):
            if g.label != d.label or abs(g.timestamp - d.timestamp) > dt_max:
                continue
            o = overlap_rho(g.points, d.points, rho)
            if o >= min_overlap:
                O[i, j] = o
                matches.append((i, j, o))

    def mapping(M):
        out = []
        for row in M:
            ok = ~np.isnan(row)
            out.append(int(np.argmax(np.where(ok, row, -1.0))) if ok.any() else -1)
        return out

    g2d = mapping(O)
    d2g = mapping(O.T)

    def stats(pairs):
        if not pairs:
            return 0.0, 0.0
        ov = [O[i, j] for i, j in pairs]
        dl = [gt[i].timestamp - det[j].timestamp for i, j in pairs]
        return float(np.mean(ov)), float(np.mean(dl))

    g_pairs = [(i, j) for i, j in enumerate(g2d) if j >= 0]
    d_pairs = [(i, j) for j, i in enumerate(d2g) if i >= 0]
    g_ov, g_dl = stats(g_pairs)
    d_ov, d_dl = stats(d_pairs)
    frac_g = 100.0 * len(g_pairs) / len(gt) if gt else 0.0
    frac_d = 100.0 * len(d_pairs) / len(det) if det else 0.0
    return EventMatchReport(frac_g, frac_d, g_ov, g_dl, d_ov, d_dl, matches, g2d, d2g)


def visible_mask(points, depth: DepthFrame, dz_occ: float = 0.01) -> np.ndarray:
    """False where a point lies more than ``dz_occ`` behind the depth map.

    Points projecting outside the image or onto invalid depth are kept.
    """
    K = depth.require_intrinsics()
    pts = as_points(points)
    col, row, ok = K.pixel_of(pts, depth.width, depth.height)
    vis = np.ones(len(pts), dtype=bool)
    idx = np.nonzero(ok)[0]
    z_map = depth.depth[row[idx], col[idx]]
    has = z_map > 0
    behind = pts[idx[has], 2] > z_map[has] + dz_occ
    vis[idx[has][behind]] = False
    return vis


def separation_registration_error(source: OrientedPointCloud | np.ndarray, target,
                                  target_depth: DepthFrame, warp: DenseWarp, mask,
                                  dz_occ: float = 0.01) -> float:
    """Mean nearest-neighbor distance (mm) from warped masked source points
    to the target, after dropping warped points occluded in the target view."""
    pts = source.points if isinstance(source, OrientedPointCloud) else as_points(source)
    tgt = target.points if isinstance(target, OrientedPointCloud) else as_points(target)
    mask = np.asarray(mask)
    idx = np.nonzero(mask)[0] if mask.dtype == bool else mask.astype(np.int64)
    if len(idx) == 0:
        raise ValueError("empty mask")
    moved = warp.take(idx).apply(pts[idx])
    moved = moved[visible_mask(moved, target_depth, dz_occ)]
    if len(moved) == 0:
        raise ValueError("no visible points")
    _, d = SpatialIndex(tgt).nearest_many(moved)
    return float(d.mean() * 1000.0)

"""Contact/separation detection from forward and backward warps, and blending
of the two forward hypotheses around detected events."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import OrientedPointCloud, SpatialIndex, as_points, nearest_rotation, point_distances
from .warp import DenseWarp, invert_rebase

CONTACT = "contact"
SEPARATION = "separation"
LABELS = (CONTACT, SEPARATION)
COINCIDENT = 1e-9


@dataclass(frozen=True)
class TopologyConfig:
    rho_s: float = 0.015
    tau: float = 2.2
    alpha: float = 1.5
    rho_e: float = 0.075
    cluster_dist: float = 0.02
    min_event_points: int = 75
    blend_clustered: bool = False
    enabled: bool = True

    def __post_init__(self):
        if not (self.rho_s > 0 and self.rho_e > 0 and self.cluster_dist > 0 and self.tau > 0):
            raise ValueError("topology radii and tau must be positive")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.min_event_points < 1:
            raise ValueError("min_event_points must be >= 1")


@dataclass
class TopologyEvent:
    label: str
    timestamp: int
    points: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown event label {self.label!r}")
        self.points = as_points(self.points, "event points")
        if self.indices is not None:
            self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass
class BlendWeights:
    w_f: np.ndarray
    w_b: np.ndarray


def stretch(cloud: OrientedPointCloud | np.ndarray, warp: DenseWarp, rho_s: float,
            index: SpatialIndex | None = None) -> np.ndarray:
    """Largest neighbor-distance ratio (after/before warping) over the
    ``rho_s`` ball of every point; 1 for points without usable neighbors."""
    pts = cloud.points if isinstance(cloud, OrientedPointCloud) else as_points(cloud)
    if not rho_s > 0:
        raise ValueError("rho_s must be positive")
    moved = warp.apply(pts)
    index = index or SpatialIndex(pts)
    i, j, d0 = index.pairs_within(rho_s)
    keep = d0 >= COINCIDENT
    i, j, d0 = i[keep], j[keep], d0[keep]
    ratio = point_distances(moved[i], moved[j]) / d0
    out = np.full(len(pts), -np.inf)
    np.maximum.at(out, i, ratio)
    np.maximum.at(out, j, ratio)
    out[np.isneginf(out)] = 1.0
    return out


def compress_map(source: OrientedPointCloud, target: OrientedPointCloud,
                 forward_dense: DenseWarp, stretch_target, target_index: SpatialIndex | None = None
                 ) -> np.ndarray:
    """Pull a stretch field on ``target`` back onto ``source`` through the
    nearest target point of every warped source point."""
    st = np.asarray(stretch_target, dtype=np.float64)
    if len(st) != len(target):
        raise ValueError("stretch field does not match the target size")
    target_index = target_index or SpatialIndex(target.points)
    j, _ = target_index.nearest_many(forward_dense.apply(source.points))
    return st[j]


def extract_events(stretch_f, stretch_b, compress_f, compress_b, tau: float = 2.2,
                   alpha: float = 1.5) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (contact, separation) membership masks over the source points."""
    if not tau > 0 or alpha < 1:
        raise ValueError("need tau > 0 and alpha >= 1")
    s = np.maximum(np.asarray(stretch_f, dtype=np.float64), np.asarray(stretch_b, dtype=np.float64))
    c = np.maximum(np.asarray(compress_f, dtype=np.float64), np.asarray(compress_b, dtype=np.float64))
    sep = (s > tau) & (s > alpha * c)
    con = (c > tau) & (c > alpha * s)
    return con, sep


def _components(points: np.ndarray, cluster_dist: float) -> np.ndarray:
    n = len(points)
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    i, j, _ = SpatialIndex(points).pairs_within(cluster_dist)
    adj = coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels.astype(np.int64)


def cluster_events(points, con_mask, sep_mask, timestamp: int = 0, cluster_dist: float = 0.02,
                   min_points: int = 75) -> list[TopologyEvent]:
    """Single-linkage components of each class; small components are dropped.

    Events are ordered contacts first, then by the smallest member index.
    """
    if not cluster_dist > 0:
        raise ValueError("cluster_dist must be positive")
    pts = points.points if isinstance(points, OrientedPointCloud) else as_points(points)
    events = []
    for label, mask in ((CONTACT, con_mask), (SEPARATION, sep_mask)):
        idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
        if len(idx) == 0:
            continue
        comp = _components(pts[idx], cluster_dist)
        first = np.full(comp.max() + 1, len(idx))
        np.minimum.at(first, comp, np.arange(len(idx)))
        for c in np.argsort(first, kind="stable"):
            members = idx[comp == c]
            if len(members) >= min_points:
                events.append(TopologyEvent(label, timestamp, pts[members], members))
    return events


def _kernel_mass(index: SpatialIndex | None, queries, rho_e, sigma):
    mass = np.zeros(len(queries))
    if index is None:
        return mass
    qi, _, d = index.radius_neighbors(queries, rho_e)
    np.add.at(mass, qi, np.exp(-(d * d) / (2 * sigma * sigma)))
    return mass


def blend(source, forward: DenseWarp, backward: DenseWarp, con_points, sep_points,
          rho_e: float = 0.075) -> tuple[DenseWarp, BlendWeights]:
    """Per-point convex blend of two warps over ``source``.

    Contact points within ``rho_e`` add RBF mass to the forward weight (which
    starts at 1), separation points add mass to the backward weight. Blended
    rotation blocks are projected to the nearest rotation; points with zero
    backward weight keep their forward transform untouched.
    """
    pts = source.points if isinstance(source, OrientedPointCloud) else as_points(source)
    if not rho_e > 0:
        raise ValueError("rho_e must be positive")
    if len(forward) != len(pts) or len(backward) != len(pts):
        raise ValueError("support size mismatch")
    sigma = rho_e / 3.0
    con = as_points(con_points)
    sep = as_points(sep_points)
    wf_raw = 1.0 + _kernel_mass(SpatialIndex(con) if len(con) else None, pts, rho_e, sigma)
    wb_raw = _kernel_mass(SpatialIndex(sep) if len(sep) else None, pts, rho_e, sigma)
    w_b = wb_raw / (wf_raw + wb_raw)
    w_f = 1.0 - w_b

    R = np.array(forward.rotations)
    t = np.array(forward.translations)
    mix = np.nonzero(w_b > 0)[0]
    if len(mix):
        a, b = w_f[mix, None], w_b[mix, None]
        R[mix] = nearest_rotation(a[:, :, None] * forward.rotations[mix]
                                  + b[:, :, None] * backward.rotations[mix])
        t[mix] = a * forward.translations[mix] + b * backward.translations[mix]
    return DenseWarp(R, t), BlendWeights(w_f, w_b)


@dataclass
class TopologyResult:
    warp: DenseWarp
    events: list[TopologyEvent]
    weights: BlendWeights
    forward: object = None
    backward: object = None
    forward_warp: DenseWarp | None = None
    inverted_backward: DenseWarp | None = None
    con_mask: np.ndarray | None = None
    sep_mask: np.ndarray | None = None
    fields: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.warp, self.events, self.weights))


def detect_events(source: OrientedPointCloud, target: OrientedPointCloud, w_sf: DenseWarp,
                  w_db: DenseWarp, cfg: TopologyConfig, workers: int = 1):
    """Stretch/compress fields and raw event masks from a forward warp over
    ``source`` and a backward warp over ``target``."""
    w_sb = invert_rebase(w_db, target, source, workers)
    w_df = invert_rebase(w_sf, source, target, workers)
    s_index = SpatialIndex(source.points, workers=workers)
    d_index = SpatialIndex(target.points, workers=workers)
    fields = {
        "stretch_s_f": stretch(source, w_sf, cfg.rho_s, s_index),
        "stretch_s_b": stretch(source, w_sb, cfg.rho_s, s_index),
        "stretch_d_f": stretch(target, w_df, cfg.rho_s, d_index),
        "stretch_d_b": stretch(target, w_db, cfg.rho_s, d_index),
    }
    fields["compress_s_f"] = compress_map(source, target, w_sf, fields["stretch_d_f"], d_index)
    fields["compress_s_b"] = compress_map(source, target, w_sb, fields["stretch_d_b"], d_index)
    con, sep = extract_events(fields["stretch_s_f"], fields["stretch_s_b"],
                              fields["compress_s_f"], fields["compress_s_b"],
                              cfg.tau, cfg.alpha)
    return w_sb, con, sep, fields


def topology_aware_register(source: OrientedPointCloud, target: OrientedPointCloud,
                            icp_cfg=None, topo_cfg: TopologyConfig | None = None,
                            timestamp: int = 0) -> TopologyResult:
    """Forward and backward registration followed by event detection and
    blending. With ``topo_cfg.enabled`` false the forward warp is returned
    as is and no events are computed."""
    from .icp import IcpConfig, register, register_bidirectional

    icp_cfg = icp_cfg or IcpConfig()
    topo_cfg = topo_cfg or TopologyConfig()
    if not topo_cfg.enabled:
        fwd = register(source, target, cfg=icp_cfg)
        n = len(source)
        return TopologyResult(fwd.warp, [], BlendWeights(np.ones(n), np.zeros(n)), fwd, None,
                              fwd.warp)
    fwd, bwd = register_bidirectional(source, target, icp_cfg)
    w_sb, con, sep, fields = detect_events(source, target, fwd.warp, bwd.warp, topo_cfg,
                                           icp_cfg.workers)
    events = cluster_events(source, con, sep, timestamp, topo_cfg.cluster_dist,
                            topo_cfg.min_event_points)
    if topo_cfg.blend_clustered:
        con_pts = [e.points for e in events if e.label == CONTACT]
        sep_pts = [e.points for e in events if e.label == SEPARATION]
        con_pts = np.concatenate(con_pts) if con_pts else np.zeros((0, 3))
        sep_pts = np.concatenate(sep_pts) if sep_pts else np.zeros((0, 3))
    else:
        con_pts, sep_pts = source.points[con], source.points[sep]
    warp, weights = blend(source, fwd.warp, w_sb, con_pts, sep_pts, topo_cfg.rho_e)
    return TopologyResult(warp, events, weights, fwd, bwd, fwd.warp, w_sb, con, sep, fields)

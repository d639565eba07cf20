"""Dense (nearest-neighbor or projective) and sparse (keypoint) correspondences
between a warped source and a target cloud, with distance/normal/color gating."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import DepthFrame, depth_to_cloud
from .geometry import OrientedPointCloud, SpatialIndex, point_distances


@dataclass(frozen=True)
class GatingThresholds:
    max_distance: float = 0.15
    max_normal_angle: float = np.deg2rad(15.0)
    max_color_distance: float = 0.4

    def __post_init__(self):
        if not (self.max_distance > 0 and self.max_normal_angle > 0
                and self.max_color_distance > 0):
            raise ValueError("gating thresholds must be positive")


def _empty_pairs() -> np.ndarray:
    return np.zeros((0, 2), dtype=np.int64)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Index pairs ``(source i, target j)``; ``dense`` feeds the point-to-plane
    term, ``sparse`` the point-to-point term."""

    dense: np.ndarray = field(default_factory=_empty_pairs)
    sparse: np.ndarray = field(default_factory=_empty_pairs)

    def __post_init__(self):
        for name in ("dense", "sparse"):
            arr = np.array(getattr(self, name), dtype=np.int64).reshape(-1, 2)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.dense) + len(self.sparse)

    def validate(self, n_source: int, n_target: int) -> None:
        for arr in (self.dense, self.sparse):
            if len(arr) == 0:
                continue
            if arr[:, 0].min() < 0 or arr[:, 0].max() >= n_source:
                raise ValueError("source index out of range")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= n_target:
                raise ValueError("target index out of range")
            if len(np.unique(arr, axis=0)) != len(arr):
                raise ValueError("duplicate correspondence pair")


def gate_pairs(source: OrientedPointCloud, target: OrientedPointCloud, pairs,
               g: GatingThresholds) -> np.ndarray:
    """Keep pairs that pass the distance, normal-angle and color tests."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return pairs
    i, j = pairs[:, 0], pairs[:, 1]
    dist = point_distances(source.points[i], target.points[j])
    cosang = np.clip(np.sum(source.normals[i] * target.normals[j], axis=1), -1.0, 1.0)
    col = point_distances(source.colors[i], target.colors[j])
    keep = (source.valid[i] & target.valid[j]
            & (dist < g.max_distance)
            & (np.arccos(cosang) < g.max_normal_angle)
            & (col < g.max_color_distance))
    return pairs[keep]


def find_dense_nn(warped_source: OrientedPointCloud, target: OrientedPointCloud,
                  target_index: SpatialIndex | None, g: GatingThresholds) -> np.ndarray:
    """One candidate per source point: its nearest target point."""
    if len(warped_source) == 0 or len(target) == 0:
        raise ValueError("empty point set")
    if target_index is None:
        target_index = SpatialIndex(target.points)
    src = np.nonzero(warped_source.valid)[0]
    if len(src) == 0:
        return _empty_pairs()
    j, _ = target_index.nearest_many(warped_source.points[src])
    return gate_pairs(warped_source, target, np.stack([src, j], axis=1), g)


def find_dense_projective(warped_source: OrientedPointCloud, target_frame: DepthFrame,
                          g: GatingThresholds,
                          target: OrientedPointCloud | None = None) -> np.ndarray:
    """Pair each source point with the target sample at its projected pixel.

    Target indices refer to ``depth_to_cloud(target_frame)`` (valid pixels in
    row-major order); pass that cloud as ``target`` to avoid recomputing it.
    """
    K = target_frame.require_intrinsics()
    if target is None:
        target = depth_to_cloud(target_frame)
    col, row, ok = K.pixel_of(warped_source.points, target_frame.width, target_frame.height)
    ok &= warped_source.valid
    pix = target_frame.pixel_index()
    src = np.nonzero(ok)[0]
    j = pix[row[src], col[src]]
    hit = j >= 0
    return gate_pairs(warped_source, target, np.stack([src[hit], j[hit]], axis=1), g)


def match_descriptors(src_desc, dst_desc, ratio: float = 0.8) -> np.ndarray:
    """Mutual nearest neighbors in descriptor space that pass the ratio test.

    Returns pairs of keypoint positions ``(a, b)``. A lone target descriptor
    has no runner-up, so the ratio test is vacuous for it.
    """
    A = np.asarray(src_desc, dtype=np.float64)
    B = np.asarray(dst_desc, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError("descriptor dimensionality mismatch")
    if len(A) == 0 or len(B) == 0:
        return _empty_pairs()
    D = point_distances(A[:, None, :], B[None, :, :])
    best = np.argmin(D, axis=1)
    back = np.argmin(D, axis=0)
    a = np.arange(len(A))
    mutual = back[best] == a
    if len(B) > 1:
        part = np.partition(D, 1, axis=1)
        d1, d2 = part[:, 0], part[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            passes = np.where(d2 > 0, d1 / d2 < ratio, False)
    else:
        passes = np.ones(len(A), dtype=bool)
    keep = mutual & passes
    return np.stack([a[keep], best[keep]], axis=1)


def match_keypoints(source: OrientedPointCloud, target: OrientedPointCloud,
                    g: GatingThresholds, ratio: float = 0.8,
                    matches=None) -> np.ndarray:
    """Sparse pairs between host points of matched keypoints.

    ``matches`` may supply keypoint pairs directly, bypassing descriptor
    matching; spatial gating is applied either way.
    """
    if source.keypoints is None or target.keypoints is None:
        return _empty_pairs()
    if matches is None:
        matches = match_descriptors(source.keypoints.descriptors,
                                    target.keypoints.descriptors, ratio)
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    pairs = np.stack([source.keypoints.indices[matches[:, 0]],
                      target.keypoints.indices[matches[:, 1]]], axis=1)
    pairs = np.unique(pairs, axis=0) if len(pairs) else pairs
    return gate_pairs(source, target, pairs, g)

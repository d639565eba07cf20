"""Geometric primitives: rigid transforms, Euler parameters, oriented clouds,
an exact kd-tree index, voxel downsampling and PCA normal estimation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TypeAlias

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

Array: TypeAlias = NDArray[np.float64]

ORTHO_TOL = 1e-9
GIMBAL_MARGIN = 1e-3


def as_points(x, name: str = "points") -> Array:
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {pts.shape}")
    return pts


def point_distances(a: Array, b: Array) -> Array:
    """Euclidean norm of ``a - b`` along the last axis.

    Every exact distance in the package goes through this one formula, so
    tie-breaking decisions are reproducible bit for bit.
    """
    d = a - b
    return np.sqrt(np.sum(d * d, axis=-1))


# ---------------------------------------------------------------------------
# Rotations and rigid transforms
# ---------------------------------------------------------------------------

def euler_to_rotation(angles) -> Array:
    """Rotation matrices ``Rz(c) @ Ry(b) @ Rx(a)`` for angles ``(..., 3)``."""
    ang = np.asarray(angles, dtype=np.float64)
    a, b, c = ang[..., 0], ang[..., 1], ang[..., 2]
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    R = np.empty(ang.shape[:-1] + (3, 3))
    R[..., 0, 0] = cc * cb
    R[..., 0, 1] = cc * sb * sa - sc * ca
    R[..., 0, 2] = cc * sb * ca + sc * sa
    R[..., 1, 0] = sc * cb
    R[..., 1, 1] = sc * sb * sa + cc * ca
    R[..., 1, 2] = sc * sb * ca - cc * sa
    R[..., 2, 0] = -sb
    R[..., 2, 1] = cb * sa
    R[..., 2, 2] = cb * ca
    return R


def euler_rotation_derivatives(angles) -> Array:
    """Partial derivatives of :func:`euler_to_rotation`.

    Returns shape ``(..., 3, 3, 3)`` where index ``[..., k, :, :]`` is
    ``dR/d angle_k``.
    """
    ang = np.asarray(angles, dtype=np.float64)
    a, b, c = ang[..., 0], ang[..., 1], ang[..., 2]
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    dR = np.zeros(ang.shape[:-1] + (3, 3, 3))
    # d/da
    dR[..., 0, 0, 1] = cc * sb * ca + sc * sa
    dR[..., 0, 0, 2] = -cc * sb * sa + sc * ca
    dR[..., 0, 1, 1] = sc * sb * ca - cc * sa
    dR[..., 0, 1, 2] = -sc * sb * sa - cc * ca
    dR[..., 0, 2, 1] = cb * ca
    dR[..., 0, 2, 2] = -cb * sa
    # d/db
    dR[..., 1, 0, 0] = -cc * sb
    dR[..., 1, 0, 1] = cc * cb * sa
    dR[..., 1, 0, 2] = cc * cb * ca
    dR[..., 1, 1, 0] = -sc * sb
    dR[..., 1, 1, 1] = sc * cb * sa
    dR[..., 1, 1, 2] = sc * cb * ca
    dR[..., 1, 2, 0] = -cb
    dR[..., 1, 2, 1] = -sb * sa
    dR[..., 1, 2, 2] = -sb * ca
    # d/dc
    dR[..., 2, 0, 0] = -sc * cb
    dR[..., 2, 0, 1] = -sc * sb * sa - cc * ca
    dR[..., 2, 0, 2] = -sc * sb * ca + cc * sa
    dR[..., 2, 1, 0] = cc * cb
    dR[..., 2, 1, 1] = cc * sb * sa - sc * ca
    dR[..., 2, 1, 2] = cc * sb * ca + sc * sa
    return dR


def rotation_to_euler(R) -> Array:
    """Inverse of :func:`euler_to_rotation` away from gimbal lock."""
    R = np.asarray(R, dtype=np.float64)
    s = np.clip(-R[..., 2, 0], -1.0, 1.0)
    pitch = np.arcsin(s)
    if np.any(np.abs(pitch) >= np.pi / 2 - GIMBAL_MARGIN):
        raise ValueError("euler extraction near singularity")
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    return np.stack([roll, pitch, yaw], axis=-1)


def rotation_angle(R) -> Array:
    """Geodesic angle (radians) of rotation matrices."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def nearest_rotation(M) -> Array:
    """Project ``(..., 3, 3)`` matrices onto SO(3) in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    d = np.where(np.linalg.det(U @ Vt) < 0, -1.0, 1.0)
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def is_rotation(R, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    eye = np.eye(3)
    RtR = np.swapaxes(R, -1, -2) @ R
    if np.any(np.abs(RtR - eye) > tol):
        return False
    return bool(np.all(np.abs(np.linalg.det(R) - 1.0) <= tol))


@dataclass(frozen=True)
class RigidTransform:
    rotation: Array = field(default_factory=lambda: np.eye(3))
    translation: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("non-finite transform")
        if not is_rotation(R):
            raise ValueError("rotation is not orthonormal with det +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> Array:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def apply(self, points) -> Array:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def euler_to_transform(params) -> RigidTransform:
    """Six parameters ``(roll, pitch, yaw, tx, ty, tz)`` to a rigid transform."""
    p = np.asarray(params, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite euler parameters")
    return RigidTransform(euler_to_rotation(p[:3]), p[3:])


def transform_to_euler(T: RigidTransform) -> Array:
    return np.concatenate([rotation_to_euler(T.rotation), T.translation])


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Keypoints:
    """Sparse interest points hosted on cloud points.

    ``indices[m]`` is the host point of keypoint ``m``; its position is the
    host's position, so warping the cloud moves the keypoints too.
    """

    indices: NDArray[np.int64]
    descriptors: Array

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64).reshape(-1)
        desc = np.array(self.descriptors, dtype=np.float64)
        if desc.ndim != 2 or desc.shape[0] != idx.size:
            raise ValueError("descriptors must be (M, d) with one row per keypoint")
        idx.flags.writeable = False
        desc.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class OrientedPointCloud:
    """Points with unit normals and RGB colors in [0, 1].

    ``valid`` flags points whose normal is defined; invalid points carry a
    zero normal and are skipped by correspondence gating.
    """

    points: Array
    normals: Array
    colors: Array | None = None
    valid: NDArray[np.bool_] | None = None
    keypoints: Keypoints | None = None

    def __post_init__(self):
        pts = np.array(as_points(self.points), dtype=np.float64)
        n = len(pts)
        nrm = np.array(as_points(self.normals, "normals"), dtype=np.float64) if n else np.zeros((0, 3))
        if self.colors is None:
            col = np.full((n, 3), 0.5)
        else:
            col = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
        if not (len(nrm) == len(col) == n):
            raise ValueError("points, normals and colors must have equal length")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point coordinates")
        if np.any(col < 0.0) or np.any(col > 1.0):
            raise ValueError("colors must lie in [0, 1]")
        norms = np.linalg.norm(nrm, axis=1)
        if self.valid is None:
            valid = norms > 0.5
        else:
            valid = np.array(self.valid, dtype=bool).reshape(n)
        if np.any(np.abs(norms[valid] - 1.0) > 1e-6):
            raise ValueError("normals must have unit length")
        nrm[~valid] = 0.0
        if self.keypoints is not None and len(self.keypoints):
            if self.keypoints.indices.min() < 0 or self.keypoints.indices.max() >= n:
                raise ValueError("keypoint host index out of range")
        for a in (pts, nrm, col, valid):
            a.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "valid", valid)

    def __len__(self) -> int:
        return len(self.points)

    def with_geometry(self, points, normals) -> OrientedPointCloud:
        """Same colors, validity and keypoints on new positions/normals."""
        return OrientedPointCloud(points, normals, self.colors, self.valid, self.keypoints)

    def subset(self, indices) -> OrientedPointCloud:
        idx = np.asarray(indices, dtype=np.int64)
        kp = None
        if self.keypoints is not None:
            remap = np.full(len(self), -1, dtype=np.int64)
            remap[idx] = np.arange(idx.size)
            host = remap[self.keypoints.indices]
            keep = host >= 0
            kp = Keypoints(host[keep], self.keypoints.descriptors[keep])
        return OrientedPointCloud(self.points[idx], self.normals[idx], self.colors[idx],
                                  self.valid[idx], kp)


# ---------------------------------------------------------------------------
# Spatial index
# ---------------------------------------------------------------------------

class SpatialIndex:
    """kd-tree whose answers equal a brute-force scan.

    The tree only proposes candidates; ranking uses :func:`point_distances`
    with ties broken by the lower point index.
    """

    def __init__(self, points, workers: int = 1):
        pts = np.array(as_points(points), dtype=np.float64)
        if len(pts) == 0:
            raise ValueError("empty point set")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point coordinates")
        pts.flags.writeable = False
        self.points = pts
        self.workers = workers
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def knn(self, queries, k: int) -> tuple[NDArray[np.int64], Array]:
        """``k`` nearest neighbors of each query, shape ``(M, k)``."""
        Q = as_points(queries, "queries")
        n = len(self.points)
        if k < 1:
            raise ValueError("k must be >= 1")
        k = min(k, n)
        if len(Q) == 0:
            return np.zeros((0, k), dtype=np.int64), np.zeros((0, k))
        kq = min(n, k + 8)
        d_tree, idx = self._tree.query(Q, kq, workers=self.workers)
        d_tree = np.asarray(d_tree).reshape(len(Q), kq)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(Q), kq)
        d = point_distances(self.points[idx], Q[:, None, :])
        order = np.lexsort((idx, d), axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)[:, :k]
        d = np.take_along_axis(d, order, axis=-1)[:, :k]
        if kq < n:
            # unseen points lie at tree distance >= the last retrieved one
            unsure = np.nonzero(d[:, -1] >= d_tree[:, -1] * (1.0 - 1e-9))[0]
            for r in unsure:
                cand = np.asarray(
                    self._tree.query_ball_point(Q[r], d[r, -1] * (1 + 1e-9) + 1e-12),
                    dtype=np.int64)
                dc = point_distances(self.points[cand], Q[r])
                o = np.lexsort((cand, dc))[:k]
                idx[r], d[r] = cand[o], dc[o]
        return idx, d

    def nearest_many(self, queries) -> tuple[NDArray[np.int64], Array]:
        idx, d = self.knn(queries, 1)
        return idx[:, 0], d[:, 0]

    def nearest(self, q) -> tuple[int, float]:
        idx, d = self.knn(np.asarray(q, dtype=np.float64).reshape(1, 3), 1)
        return int(idx[0, 0]), float(d[0, 0])

    def radius_search(self, q, radius: float) -> list[tuple[int, float]]:
        """All points within ``radius`` of ``q`` sorted by (distance, index)."""
        if not radius > 0:
            raise ValueError("non-positive radius")
        q = np.asarray(q, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12),
                          dtype=np.int64)
        d = point_distances(self.points[cand], q)
        keep = d <= radius
        cand, d = cand[keep], d[keep]
        o = np.lexsort((cand, d))
        return [(int(i), float(x)) for i, x in zip(cand[o], d[o])]

    def radius_neighbors(self, queries, radius: float):
        """Flattened radius neighborhoods for many queries.

        Returns ``(qi, pj, dist)`` arrays: query ``qi[m]`` has stored point
        ``pj[m]`` within ``radius``. Rows are ordered by query, then index.
        """
        if not radius > 0:
            raise ValueError("non-positive radius")
        Q = as_points(queries, "queries")
        lists = self._tree.query_ball_point(Q, radius * (1 + 1e-9) + 1e-12,
                                            workers=self.workers)
        counts = np.fromiter((len(c) for c in lists), dtype=np.int64, count=len(Q))
        qi = np.repeat(np.arange(len(Q), dtype=np.int64), counts)
        pj = (np.concatenate([np.asarray(c, dtype=np.int64) for c in lists])
              if counts.sum() else np.zeros(0, dtype=np.int64))
        d = point_distances(self.points[pj], Q[qi])
        keep = d <= radius
        qi, pj, d = qi[keep], pj[keep], d[keep]
        o = np.lexsort((pj, qi))
        return qi[o], pj[o], d[o]

    def pairs_within(self, radius: float):
        """Unordered index pairs ``i < j`` of stored points within ``radius``."""
        if not radius > 0:
            raise ValueError("non-positive radius")
        pairs = self._tree.query_pairs(radius * (1 + 1e-9) + 1e-12, output_type="ndarray")
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        pairs.sort(axis=1)
        d = point_distances(self.points[pairs[:, 0]], self.points[pairs[:, 1]])
        keep = d <= radius
        pairs, d = pairs[keep], d[keep]
        o = np.lexsort((pairs[:, 1], pairs[:, 0]))
        return pairs[o, 0], pairs[o, 1], d[o]


def build_index(points, workers: int = 1) -> SpatialIndex:
    return SpatialIndex(points, workers=workers)


def nearest(index: SpatialIndex, q) -> tuple[int, float]:
    return index.nearest(q)


def radius_search(index: SpatialIndex, q, radius: float) -> list[tuple[int, float]]:
    return index.radius_search(q, radius)


# ---------------------------------------------------------------------------
# Downsampling and normals
# ---------------------------------------------------------------------------

def voxel_members(points, r_b: float) -> tuple[Array, NDArray[np.int64]]:
    """Voxelize ``points`` on a grid anchored at the origin.

    Returns the centroid of every occupied voxel (ordered by voxel key) and
    the voxel id of each input point. Summation runs in lexicographic point
    order so the centroids do not depend on input order.
    """
    if not r_b > 0:
        raise ValueError("voxel size must be positive")
    pts = as_points(points)
    if len(pts) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    keys = np.floor(pts / r_b).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], inverse))
    inv_sorted = inverse[order]
    count = np.bincount(inv_sorted)
    centroids = np.stack(
        [np.bincount(inv_sorted, weights=pts[order, a]) for a in range(3)], axis=1)
    return centroids / count[:, None], inverse


def voxel_downsample(points, r_b: float) -> Array:
    return voxel_members(points, r_b)[0]


def estimate_normals(points, k: int | None = 30, radius: float | None = None,
                     viewpoint=(0.0, 0.0, 0.0), workers: int = 1):
    """PCA normals oriented toward ``viewpoint``.

    Uses ``radius`` neighborhoods when given, otherwise ``k`` nearest
    neighbors (the point itself included). Returns ``(normals, valid)``;
    neighborhoods with fewer than 3 points or rank < 2 are invalid and get a
    zero normal.
    """
    pts = as_points(points)
    n = len(pts)
    index = SpatialIndex(pts, workers=workers)
    if radius is not None:
        qi, pj, _ = index.radius_neighbors(pts, radius)
    else:
        if k is None or k < 1:
            raise ValueError("need k >= 1 or a radius")
        idx, _ = index.knn(pts, k)
        qi = np.repeat(np.arange(n), idx.shape[1])
        pj = idx.reshape(-1)
    count = np.bincount(qi, minlength=n).astype(np.float64)
    rel = pts[pj] - pts[qi]
    s1 = np.stack([np.bincount(qi, weights=rel[:, a], minlength=n) for a in range(3)], axis=1)
    s2 = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s2[:, a, b] = s2[:, b, a] = np.bincount(qi, weights=rel[:, a] * rel[:, b],
                                                    minlength=n)
    safe = np.maximum(count, 1.0)
    mean = s1 / safe[:, None]
    cov = s2 / safe[:, None, None] - mean[:, :, None] * mean[:, None, :]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    valid = (count >= 3) & (evals[:, 1] > 1e-10 * scale) & (evals[:, 2] > 0)
    view = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    flip = np.sum(normals * (view - pts), axis=1) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[~valid] = 0.0
    return normals, valid

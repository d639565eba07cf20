"""Embedded deformation graphs and per-point (dense) warp fields.

A graph warp moves a point ``x`` by the rigid transform whose six Euler
parameters are the Gaussian-weighted average of the parameters of its
``interp_k`` nearest nodes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    OrientedPointCloud,
    RigidTransform,
    SpatialIndex,
    as_points,
    euler_to_rotation,
    voxel_members,
)

DWRP_MAGIC = b"DWRP"
DWRP_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class DeformationGraph:
    nodes: np.ndarray
    sigma: float
    interp_k: int
    r_b: float
    index: SpatialIndex
    members: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def num_params(self) -> int:
        return 6 * len(self.nodes)

    def identity_params(self) -> np.ndarray:
        return np.zeros((len(self.nodes), 6))

    def node_transforms(self, node_params) -> DenseWarp:
        p = np.asarray(node_params, dtype=np.float64).reshape(-1, 6)
        return DenseWarp(euler_to_rotation(p[:, :3]), p[:, 3:].copy())


def graph_from_nodes(nodes, r_b: float, interp_k: int = 4, members=None,
                     workers: int = 1, sigma: float | None = None) -> DeformationGraph:
    """Graph over explicit node positions; ``sigma`` defaults to ``r_b / 2``."""
    nodes = as_points(nodes, "nodes")
    if interp_k < 1:
        raise ValueError("interp_k must be >= 1")
    if len(nodes) < interp_k:
        raise ValueError("graph too small")
    sigma = r_b / 2.0 if sigma is None else sigma
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return DeformationGraph(nodes, sigma, interp_k, r_b,
                            SpatialIndex(nodes, workers=workers), members)


def build_graph(source: OrientedPointCloud, r_b: float, interp_k: int = 4,
                workers: int = 1, sigma: float | None = None) -> DeformationGraph:
    """Nodes at the centroids of the occupied ``r_b`` voxels of ``source``."""
    if len(source) == 0:
        raise ValueError("empty point set")
    if not r_b > 0:
        raise ValueError("voxel size must be positive")
    nodes, members = voxel_members(source.points, r_b)
    return graph_from_nodes(nodes, r_b, interp_k, members, workers, sigma)


def interpolation_weights(graph: DeformationGraph, points):
    """Neighbor node ids and normalized weights, both shape ``(N, k)``.

    Falls back to uniform weights where every Gaussian underflows.
    """
    pts = as_points(points)
    idx, dist = graph.index.knn(pts, graph.interp_k)
    w = np.exp(-(dist * dist) / (2.0 * graph.sigma ** 2))
    total = w.sum(axis=1, keepdims=True)
    dead = total[:, 0] == 0.0
    if np.any(dead):
        w[dead] = 1.0
        total[dead] = w.shape[1]
    return idx, w / total


def interpolate_params(graph: DeformationGraph, points, node_params) -> np.ndarray:
    params = np.asarray(node_params, dtype=np.float64).reshape(len(graph), 6)
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    idx, w = interpolation_weights(graph, pts)
    theta = np.einsum("nk,nkp->np", w, params[idx])
    return theta[0] if single else theta


def _apply_params(theta: np.ndarray, pts: np.ndarray) -> np.ndarray:
    R = euler_to_rotation(theta[:, :3])
    return np.einsum("nij,nj->ni", R, pts) + theta[:, 3:]


def warp_points(graph: DeformationGraph, node_params, points) -> np.ndarray:
    pts = as_points(points)
    return _apply_params(interpolate_params(graph, pts, node_params), pts)


def warp_point(graph: DeformationGraph, node_params, x) -> np.ndarray:
    return warp_points(graph, node_params, np.asarray(x, dtype=np.float64).reshape(1, 3))[0]


def graph_to_dense(graph: DeformationGraph, node_params, cloud) -> DenseWarp:
    """Per-point transforms of the graph warp sampled at ``cloud`` points."""
    pts = cloud.points if isinstance(cloud, OrientedPointCloud) else as_points(cloud)
    theta = interpolate_params(graph, pts, node_params)
    return DenseWarp(euler_to_rotation(theta[:, :3]), theta[:, 3:].copy())


def warp_cloud(graph: DeformationGraph, node_params,
               cloud: OrientedPointCloud) -> OrientedPointCloud:
    return graph_to_dense(graph, node_params, cloud).apply_cloud(cloud)


class DenseWarp:
    """One rigid transform per point of a support cloud."""

    def __init__(self, rotations, translations):
        R = np.array(rotations, dtype=np.float64).reshape(-1, 3, 3)
        t = np.array(translations, dtype=np.float64).reshape(-1, 3)
        if len(R) != len(t):
            raise ValueError("rotation and translation counts differ")
        R.flags.writeable = False
        t.flags.writeable = False
        self.rotations = R
        self.translations = t

    @classmethod
    def identity(cls, n: int) -> DenseWarp:
        return cls(np.broadcast_to(np.eye(3), (n, 3, 3)), np.zeros((n, 3)))

    @classmethod
    def from_transform(cls, T: RigidTransform, n: int) -> DenseWarp:
        return cls(np.broadcast_to(T.rotation, (n, 3, 3)), np.broadcast_to(T.translation, (n, 3)))

    @property
    def support_size(self) -> int:
        return len(self.rotations)

    def __len__(self) -> int:
        return len(self.rotations)

    def __getitem__(self, i: int) -> RigidTransform:
        return RigidTransform(self.rotations[i], self.translations[i])

    def take(self, indices) -> DenseWarp:
        idx = np.asarray(indices, dtype=np.int64)
        return DenseWarp(self.rotations[idx], self.translations[idx])

    def matrices(self) -> np.ndarray:
        M = np.zeros((len(self), 4, 4))
        M[:, :3, :3] = self.rotations
        M[:, :3, 3] = self.translations
        M[:, 3, 3] = 1.0
        return M

    def _check(self, n: int) -> None:
        if n != len(self):
            raise ValueError(f"support size mismatch: warp has {len(self)}, got {n}")

    def apply(self, points) -> np.ndarray:
        pts = as_points(points)
        self._check(len(pts))
        return np.einsum("nij,nj->ni", self.rotations, pts) + self.translations

    def apply_cloud(self, cloud: OrientedPointCloud) -> OrientedPointCloud:
        """Warp positions and rotate normals; colors and keypoints ride along."""
        pts = self.apply(cloud.points)
        nrm = np.einsum("nij,nj->ni", self.rotations, cloud.normals)
        norm = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = np.divide(nrm, norm, out=np.zeros_like(nrm), where=norm > 0)
        return cloud.with_geometry(pts, nrm)

    def inverse(self) -> DenseWarp:
        Rt = np.swapaxes(self.rotations, 1, 2)
        return DenseWarp(Rt, -np.einsum("nij,nj->ni", Rt, self.translations))

    def equals(self, other: DenseWarp, atol: float = 0.0) -> bool:
        if len(self) != len(other):
            return False
        return (np.allclose(self.rotations, other.rotations, rtol=0, atol=atol)
                and np.allclose(self.translations, other.translations, rtol=0, atol=atol))

    def to_bytes(self) -> bytes:
        body = np.concatenate([self.rotations.reshape(-1, 9), self.translations], axis=1)
        return _HEADER.pack(DWRP_MAGIC, DWRP_VERSION, len(self)) + body.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> DenseWarp:
        if len(data) < _HEADER.size:
            raise ValueError("truncated warp header")
        magic, version, count = _HEADER.unpack_from(data)
        if magic != DWRP_MAGIC:
            raise ValueError("not a DWRP file")
        if version != DWRP_VERSION:
            raise ValueError(f"unsupported DWRP version {version}")
        need = _HEADER.size + count * 12 * 8
        if len(data) < need:
            raise ValueError("truncated warp payload")
        body = np.frombuffer(data, dtype="<f8", count=count * 12, offset=_HEADER.size)
        body = body.reshape(count, 12).astype(np.float64)
        return cls(body[:, :9].reshape(-1, 3, 3), body[:, 9:])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> DenseWarp:
        return cls.from_bytes(Path(path).read_bytes())


def compose(outer: DenseWarp, inner: DenseWarp) -> DenseWarp:
    """``outer`` after ``inner``; ``outer`` must already be sampled at the
    inner-warped positions of the shared support."""
    if len(outer) != len(inner):
        raise ValueError("support size mismatch")
    R = np.einsum("nij,njk->nik", outer.rotations, inner.rotations)
    t = np.einsum("nij,nj->ni", outer.rotations, inner.translations) + outer.translations
    return DenseWarp(R, t)


def invert_rebase(backward: DenseWarp, target: OrientedPointCloud,
                  source: OrientedPointCloud, workers: int = 1) -> DenseWarp:
    """Turn a warp over ``target`` (aligning it to ``source``) into a warp over
    ``source``: each source point takes the inverse transform of its nearest
    neighbor in the warped target."""
    if len(target) == 0:
        raise ValueError("empty point set")
    if len(source) == 0:
        raise ValueError("empty point set")
    warped = backward.apply(target.points)
    j, _ = SpatialIndex(warped, workers=workers).nearest_many(source.points)
    return backward.take(j).inverse()

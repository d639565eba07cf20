"""Pinhole camera model and organized RGB-D frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import OrientedPointCloud, as_points, estimate_normals


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def project(self, points):
        """Continuous pixel coordinates ``(u, v)`` and depth ``z``."""
        pts = as_points(points)
        z = pts[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pts[:, 0] / z + self.cx
            v = self.fy * pts[:, 1] / z + self.cy
        return u, v, z

    def pixel_of(self, points, width: int, height: int):
        """Nearest pixel ``(col, row)`` of each point plus an in-view mask.

        Points with ``z <= 0`` or outside the image are marked invalid.
        """
        u, v, z = self.project(points)
        ok = np.isfinite(u) & np.isfinite(v) & (z > 0)
        col = np.zeros(len(z), dtype=np.int64)
        row = np.zeros(len(z), dtype=np.int64)
        col[ok] = np.floor(u[ok] + 0.5).astype(np.int64)
        row[ok] = np.floor(v[ok] + 0.5).astype(np.int64)
        ok &= (col >= 0) & (col < width) & (row >= 0) & (row < height)
        return col, row, ok

    def backproject(self, col, row, z):
        col = np.asarray(col, dtype=np.float64)
        row = np.asarray(row, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        return np.stack([(col - self.cx) * z / self.fx, (row - self.cy) * z / self.fy, z], axis=-1)


@dataclass(frozen=True)
class DepthFrame:
    """Organized depth image in meters (0 marks a missing sample)."""

    depth: np.ndarray
    intrinsics: Intrinsics | None
    color: np.ndarray | None = None
    depth_cutoff: float = 5.0

    def __post_init__(self):
        depth = np.array(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise ValueError("depth must be a 2D grid")
        depth[~np.isfinite(depth) | (depth < 0) | (depth > self.depth_cutoff)] = 0.0
        depth.flags.writeable = False
        object.__setattr__(self, "depth", depth)
        if self.color is not None:
            color = np.array(self.color, dtype=np.float64)
            if color.shape != depth.shape + (3,):
                raise ValueError("color must have shape (H, W, 3)")
            color.flags.writeable = False
            object.__setattr__(self, "color", color)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    def require_intrinsics(self) -> Intrinsics:
        if self.intrinsics is None:
            raise ValueError("depth frame has no intrinsics")
        return self.intrinsics

    def pixel_index(self) -> np.ndarray:
        """Cloud index of each pixel (row-major over valid pixels), -1 if invalid."""
        out = np.full(self.depth.shape, -1, dtype=np.int64)
        valid = self.valid
        out[valid] = np.arange(int(valid.sum()))
        return out

    def points(self) -> np.ndarray:
        K = self.require_intrinsics()
        rows, cols = np.nonzero(self.valid)
        return K.backproject(cols, rows, self.depth[rows, cols])


def depth_to_cloud(frame: DepthFrame, normal_k: int | None = 30,
                   normal_radius: float | None = None) -> OrientedPointCloud:
    """Back-project valid pixels (row-major) with normals facing the camera."""
    frame.require_intrinsics()
    if not frame.valid.any():
        raise ValueError("empty frame")
    pts = frame.points()
    if len(pts) >= 3:
        normals, valid = estimate_normals(pts, k=normal_k, radius=normal_radius,
                                          viewpoint=(0.0, 0.0, 0.0))
    else:
        normals, valid = np.zeros((len(pts), 3)), np.zeros(len(pts), dtype=bool)
    colors = None
    if frame.color is not None:
        colors = np.clip(frame.color[frame.valid], 0.0, 1.0)
    return OrientedPointCloud(pts, normals, colors, valid)


def render_depth(points, intrinsics: Intrinsics, width: int, height: int,
                 splat: int = 0) -> np.ndarray:
    """Z-buffer ``points`` into a depth image; ``splat`` grows each sample
    to a ``(2*splat+1)^2`` pixel square."""
    col, row, ok = intrinsics.pixel_of(points, width, height)
    z = as_points(points)[:, 2]
    depth = np.full((height, width), np.inf)
    for dr in range(-splat, splat + 1):
        for dc in range(-splat, splat + 1):
            r, c = row[ok] + dr, col[ok] + dc
            inside = (r >= 0) & (r < height) & (c >= 0) & (c < width)
            np.minimum.at(depth, (r[inside], c[inside]), z[ok][inside])
    depth[~np.isfinite(depth)] = 0.0
    return depth

"""Synthetic scene pairs with exact ground-truth warps and topology events.

Kinds:

``rigid``       bumpy closed blob under one rigid motion
``hinge``       bar whose second half rotates about a hinge axis
``separation``  two touching boxes; the second one moves away
``contact``     the time reversal of ``separation``
``slide``       box sliding on a support plane (no event is reported;
                this case is not handled by forward/backward blending)

Scenes live in a camera frame (camera at the origin looking down +z) so that
target depth maps can be rendered for occlusion tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import DepthFrame, Intrinsics, render_depth
from .geometry import Keypoints, OrientedPointCloud, RigidTransform, euler_to_rotation
from .topology import TopologyEvent
from .warp import DenseWarp

KINDS = ("rigid", "hinge", "separation", "contact", "slide")

DEFAULT_CAMERA = Intrinsics(300.0, 300.0, 159.5, 119.5)
DEFAULT_SIZE = (320, 240)


@dataclass
class SyntheticScene:
    kind: str
    source: OrientedPointCloud
    target: OrientedPointCloud
    gt_warp: DenseWarp
    gt_events: list[TopologyEvent]
    gt_segment_labels: np.ndarray
    gt_correspondence: np.ndarray
    params: dict = field(default_factory=dict)
    intrinsics: Intrinsics = DEFAULT_CAMERA
    image_size: tuple[int, int] = DEFAULT_SIZE

    def target_frame(self, splat: int = 1) -> DepthFrame:
        w, h = self.image_size
        depth = render_depth(self.target.points, self.intrinsics, w, h, splat=splat)
        return DepthFrame(depth, self.intrinsics, depth_cutoff=10.0)

    def event_mask(self, label: str | None = None) -> np.ndarray:
        mask = np.zeros(len(self.source), dtype=bool)
        for ev in self.gt_events:
            if label is None or ev.label == label:
                mask[ev.indices] = True
        return mask


def _axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _random_rotation(rng, max_angle) -> np.ndarray:
    axis = rng.normal(size=3)
    return _axis_angle(axis, rng.uniform(0.0, max_angle))


def _face_grid(lo, hi, spacing):
    n = max(1, int(round((hi - lo) / spacing)))
    step = (hi - lo) / n
    return lo + step * (np.arange(n) + 0.5)


def box_surface(lo, hi, spacing, skip=()):
    """Grid samples of the faces of an axis-aligned box.

    ``skip`` lists faces to leave out as ``(axis, side)`` with side -1/+1.
    Returns points, outward normals and the face id ``axis * 2 + (side > 0)``.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    pts, nrm, fid = [], [], []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        gu = _face_grid(lo[u], hi[u], spacing)
        gv = _face_grid(lo[v], hi[v], spacing)
        U, V = np.meshgrid(gu, gv, indexing="ij")
        for side in (-1, 1):
            if (axis, side) in skip:
                continue
            p = np.zeros((U.size, 3))
            p[:, u], p[:, v] = U.ravel(), V.ravel()
            p[:, axis] = hi[axis] if side > 0 else lo[axis]
            n = np.zeros((U.size, 3))
            n[:, axis] = side
            pts.append(p)
            nrm.append(n)
            fid.append(np.full(U.size, axis * 2 + (side > 0)))
    return np.concatenate(pts), np.concatenate(nrm), np.concatenate(fid)


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _blob(rng, n, radius):
    """Closed star-shaped surface ``r(d) = R (1 + sum c_m exp(-|d-u_m|^2 / 2s^2))``."""
    d = _fibonacci_sphere(n)
    m = 6
    u = rng.normal(size=(m, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    c = rng.uniform(-0.15, 0.25, size=m)
    s = 0.45
    diff = d[:, None, :] - u[None, :, :]
    g = np.exp(-np.sum(diff * diff, axis=2) / (2 * s * s))
    r = radius * (1 + g @ c)
    grad_d = radius * np.einsum("nm,m,nmk->nk", g, c, -diff / (s * s))
    pts = r[:, None] * d
    # gradient of |p| - r(p/|p|)
    tangential = grad_d - np.sum(grad_d * d, axis=1, keepdims=True) * d
    grad = d - tangential / r[:, None]
    nrm = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    return pts, nrm


def _texture(rng, pts, wavelength):
    """Smooth color pattern: each channel is a sinusoid along a random direction."""
    if not wavelength:
        return np.broadcast_to([0.6, 0.5, 0.4], (len(pts), 3))
    dirs = rng.normal(size=(3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    return 0.5 + 0.5 * np.sin(2 * np.pi / wavelength * (pts @ dirs.T) + phase)


def _keypoints(rng, n_points, fraction, dim=32):
    m = max(1, int(round(fraction * n_points)))
    hosts = np.sort(rng.choice(n_points, size=m, replace=False))
    return hosts, rng.normal(size=(m, dim))


def _pose(rng, center, max_angle):
    return RigidTransform(_random_rotation(rng, max_angle), center)


def _make_cloud(points, normals, colors, kp_hosts=None, kp_desc=None):
    kp = Keypoints(kp_hosts, kp_desc) if kp_hosts is not None else None
    return OrientedPointCloud(points, normals, colors, keypoints=kp)


def _segment_warp(labels, transforms, pose: RigidTransform) -> DenseWarp:
    """Per-point world transforms ``pose * T_label * pose^-1``."""
    inv = pose.inverse()
    R = np.empty((len(labels), 3, 3))
    t = np.empty((len(labels), 3))
    for lab, T in enumerate(transforms):
        W = pose @ T @ inv
        sel = labels == lab
        R[sel], t[sel] = W.rotation, W.translation
    return DenseWarp(R, t)


def _assemble(kind, rng, params, local_src, local_nrm, labels, seg_transforms, extra_tgt,
              extra_tgt_nrm, colors, event_specs, pose, kp_fraction):
    """Build world-frame source/target clouds from local-frame geometry.

    Target = per-segment transformed source points followed by ``extra_tgt``.
    """
    n = len(local_src)
    local_tgt = np.empty_like(local_src)
    local_tgt_nrm = np.empty_like(local_nrm)
    for lab, T in enumerate(seg_transforms):
        sel = labels == lab
        local_tgt[sel] = T.apply(local_src[sel])
        local_tgt_nrm[sel] = local_nrm[sel] @ T.rotation.T
    tgt = np.concatenate([local_tgt, extra_tgt])
    tgt_nrm = np.concatenate([local_tgt_nrm, extra_tgt_nrm])
    tgt_col = np.concatenate([colors, np.broadcast_to(colors[:1], (len(extra_tgt), 3))])

    world_src = pose.apply(local_src)
    world_src_nrm = local_nrm @ pose.rotation.T
    world_tgt = pose.apply(tgt)
    world_tgt_nrm = tgt_nrm @ pose.rotation.T

    hosts, desc = _keypoints(rng, n, kp_fraction)
    source = _make_cloud(world_src, world_src_nrm, colors, hosts, desc)
    target = _make_cloud(world_tgt, world_tgt_nrm, tgt_col, hosts, desc)
    gt_warp = _segment_warp(labels, seg_transforms, pose)
    events = []
    for label, mask in event_specs:
        idx = np.nonzero(mask)[0]
        events.append(TopologyEvent(label, 0, world_src[idx], idx))
    return SyntheticScene(kind, source, target, gt_warp, events, labels,
                          np.arange(n, dtype=np.int64), params)


def _boxes_scene(rng, params, reverse: bool):
    spacing = params["spacing"]
    gap = params["gap"]
    la, lb = rng.uniform(0.12, 0.16, size=2)
    h, dp = rng.uniform(0.10, 0.13), rng.uniform(0.08, 0.11)
    ylo, yhi, zlo, zhi = -h / 2, h / 2, -dp / 2, dp / 2
    shift = rng.uniform(-0.01, 0.01)
    a_lo, a_hi = np.array([-la + shift, ylo, zlo]), np.array([shift, yhi, zhi])
    b_lo, b_hi = np.array([shift, ylo, zlo]), np.array([shift + lb, yhi, zhi])
    move = RigidTransform(np.eye(3), [gap, 0.0, 0.0])
    pose = _pose(rng, params["center"], np.radians(params["max_pose_deg"]))

    # touching configuration: the shared face is interior and not sampled
    pa, na, _ = box_surface(a_lo, a_hi, spacing, skip=[(0, 1)])
    pb, nb, _ = box_surface(b_lo, b_hi, spacing, skip=[(0, -1)])
    # faces exposed once the boxes are apart
    fa, fna, _ = box_surface(a_lo, a_hi, spacing)
    fb, fnb, _ = box_surface(b_lo, b_hi, spacing)
    fa_sel = (fna[:, 0] > 0.5)
    fb_sel = (fnb[:, 0] < -0.5)
    inner_a, inner_na = fa[fa_sel], fna[fa_sel]
    inner_b, inner_nb = move.apply(fb[fb_sel]), fnb[fb_sel]
    color = np.array([0.55, 0.5, 0.45])
    band = params["event_band"]

    if not reverse:
        src = np.concatenate([pa, pb])
        nrm = np.concatenate([na, nb])
        labels = np.concatenate([np.zeros(len(pa), np.int64), np.ones(len(pb), np.int64)])
        extra = np.concatenate([inner_a, inner_b])
        extra_n = np.concatenate([inner_na, inner_nb])
        seg = [RigidTransform(), move]
        near = np.abs(src[:, 0] - shift) <= band
        events = [("separation", near)]
    else:
        src = np.concatenate([pa, inner_a, move.apply(pb), inner_b])
        nrm = np.concatenate([na, inner_na, nb, inner_nb])
        labels = np.concatenate([np.zeros(len(pa) + len(inner_a), np.int64),
                                 np.ones(len(pb) + len(inner_b), np.int64)])
        extra = np.zeros((0, 3))
        extra_n = np.zeros((0, 3))
        seg = [RigidTransform(), move.inverse()]
        contact_x = np.where(labels == 1, src[:, 0] - gap, src[:, 0])
        near = np.abs(contact_x - shift) <= band
        events = [("contact", near)]
    colors = np.broadcast_to(color, (len(src), 3))
    scene = _assemble("contact" if reverse else "separation", rng, params, src, nrm, labels,
                      seg, extra, extra_n, colors, events, pose, params["keypoint_fraction"])
    if reverse:
        # interior points of the joined pair have no counterpart in the target
        inner = np.zeros(len(src), dtype=bool)
        inner[len(pa):len(pa) + len(inner_a)] = True
        inner[len(pa) + len(inner_a) + len(pb):] = True
        corr = scene.gt_correspondence.copy()
        corr[inner] = -1
        keep = ~inner
        tgt_idx = np.full(len(src), -1, dtype=np.int64)
        tgt_idx[keep] = np.arange(int(keep.sum()))
        scene.target = scene.target.subset(np.nonzero(keep)[0])
        scene.gt_correspondence = np.where(keep, tgt_idx, -1)
    scene.params["split_plane"] = _plane_in_world(scene, pose, shift)
    return scene


def _plane_in_world(scene, pose, x):
    """Point and unit normal of the local plane ``x = const`` in the source frame."""
    return (pose.apply(np.array([[x, 0.0, 0.0]]))[0].tolist(),
            (pose.rotation @ np.array([1.0, 0.0, 0.0])).tolist())


def _rigid_scene(rng, params):
    pts, nrm = _blob(rng, params["points"], params["radius"])
    R = _random_rotation(rng, np.radians(params["max_rotation_deg"]))
    direction = rng.normal(size=3)
    t = direction / np.linalg.norm(direction) * rng.uniform(0.0, params["max_translation"])
    if params.get("identity"):
        R, t = np.eye(3), np.zeros(3)
    move = RigidTransform(R, t)
    pose = RigidTransform(np.eye(3), params["center"])
    colors = _texture(rng, pts, params["texture_wavelength"])
    labels = np.zeros(len(pts), dtype=np.int64)
    scene = _assemble("rigid", rng, params, pts, nrm, labels, [move], np.zeros((0, 3)),
                      np.zeros((0, 3)), colors, [], pose, params["keypoint_fraction"])
    scene.params["motion"] = (pose @ move @ pose.inverse()).matrix().tolist()
    return scene


def _hinge_scene(rng, params):
    spacing = params["spacing"]
    half = rng.uniform(0.14, 0.18)
    h, dp = rng.uniform(0.06, 0.08), rng.uniform(0.05, 0.07)
    p, n, _ = box_surface([-half, -h / 2, -dp / 2], [half, h / 2, dp / 2], spacing)
    labels = (p[:, 0] > 0).astype(np.int64)
    angle = np.radians(params["angle_deg"])
    bend = RigidTransform(_axis_angle([0, 1, 0], angle), [0, 0, 0])
    pose = _pose(rng, params["center"], np.radians(params["max_pose_deg"]))
    colors = np.broadcast_to([0.5, 0.55, 0.6], (len(p), 3))
    scene = _assemble("hinge", rng, params, p, n, labels, [RigidTransform(), bend],
                      np.zeros((0, 3)), np.zeros((0, 3)), colors, [], pose,
                      params["keypoint_fraction"])
    scene.params["split_plane"] = _plane_in_world(scene, pose, 0.0)
    return scene


def _slide_scene(rng, params):
    spacing = params["spacing"]
    size = rng.uniform(0.08, 0.11)
    dist = params["distance"]
    plane_half = 0.2
    g = _face_grid(-plane_half, plane_half, spacing)
    X, Z = np.meshgrid(g, g, indexing="ij")
    plane = np.stack([X.ravel(), np.full(X.size, -size / 2), Z.ravel()], axis=1)
    under_src = (np.abs(plane[:, 0]) < size / 2) & (np.abs(plane[:, 2]) < size / 2)
    under_tgt = (np.abs(plane[:, 0] - dist) < size / 2) & (np.abs(plane[:, 2]) < size / 2)
    keep = ~under_src & ~under_tgt
    plane_src = plane[keep]
    box, box_n, _ = box_surface([-size / 2] * 3, [size / 2] * 3, spacing, skip=[(1, -1)])
    src = np.concatenate([plane_src, box])
    nrm = np.concatenate([np.tile([0.0, 1.0, 0.0], (len(plane_src), 1)), box_n])
    labels = np.concatenate([np.zeros(len(plane_src), np.int64), np.ones(len(box), np.int64)])
    uncovered = plane[under_src & ~under_tgt]
    move = RigidTransform(np.eye(3), [dist, 0.0, 0.0])
    pose = _pose(rng, params["center"], np.radians(params["max_pose_deg"]))
    colors = np.broadcast_to([0.45, 0.5, 0.5], (len(src), 3))
    return _assemble("slide", rng, params, src, nrm, labels, [RigidTransform(), move],
                     uncovered, np.tile([0.0, 1.0, 0.0], (len(uncovered), 1)), colors, [],
                     pose, params["keypoint_fraction"])


_DEFAULTS = {
    "rigid": dict(points=2500, radius=0.11, max_rotation_deg=15.0, max_translation=0.05,
                  center=(0.0, 0.0, 0.7), keypoint_fraction=1.0, identity=False,
                  texture_wavelength=0.04),
    "hinge": dict(spacing=0.006, angle_deg=10.0, center=(0.0, 0.0, 0.7), max_pose_deg=20.0,
                  keypoint_fraction=0.05),
    "separation": dict(spacing=0.006, gap=0.05, center=(0.0, 0.0, 0.7), max_pose_deg=20.0,
                       keypoint_fraction=0.2, event_band=0.015),
    "contact": dict(spacing=0.006, gap=0.05, center=(0.0, 0.0, 0.7), max_pose_deg=20.0,
                    keypoint_fraction=0.2, event_band=0.015),
    "slide": dict(spacing=0.008, distance=0.05, center=(0.0, 0.0, 0.7), max_pose_deg=20.0,
                  keypoint_fraction=0.05),
}


def default_params(kind: str) -> dict:
    if kind not in _DEFAULTS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {', '.join(KINDS)}")
    return dict(_DEFAULTS[kind])


def generate_scene(kind: str, params: dict | None = None, seed: int = 0) -> SyntheticScene:
    merged = default_params(kind)
    for key, value in (params or {}).items():
        if key not in merged:
            raise ValueError(f"unknown parameter {key!r} for scene kind {kind!r}")
        merged[key] = value
    for key in ("spacing", "gap", "radius", "distance"):
        if key in merged and not merged[key] > 0:
            raise ValueError(f"parameter {key!r} must be positive")
    if "points" in merged and merged["points"] < 10:
        raise ValueError("parameter 'points' must be >= 10")
    merged["center"] = np.asarray(merged["center"], dtype=np.float64)
    rng = np.random.default_rng(seed)
    if kind == "rigid":
        scene = _rigid_scene(rng, merged)
    elif kind == "hinge":
        scene = _hinge_scene(rng, merged)
    elif kind == "separation":
        scene = _boxes_scene(rng, merged, reverse=False)
    elif kind == "contact":
        scene = _boxes_scene(rng, merged, reverse=True)
    else:
        scene = _slide_scene(rng, merged)
    scene.params["seed"] = seed
    scene.params["center"] = merged["center"].tolist()
    return scene


def euler_motion(params6) -> RigidTransform:
    p = np.asarray(params6, dtype=np.float64)
    return RigidTransform(euler_to_rotation(p[:3]), p[3:])

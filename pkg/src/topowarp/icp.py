"""Non-rigid ICP: alternate correspondence search and graph-warp optimization,
accumulating the incremental warps as per-point transforms."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .camera import DepthFrame, depth_to_cloud
from .correspondence import (
    CorrespondenceSet,
    GatingThresholds,
    find_dense_nn,
    find_dense_projective,
    match_descriptors,
    match_keypoints,
)
from .geometry import OrientedPointCloud, SpatialIndex, rotation_angle
from .solver import NoConstraintsError, ObjectiveConfig, RegistrationProblem, gauss_newton
from .warp import DeformationGraph, DenseWarp, build_graph, compose, graph_from_nodes, graph_to_dense

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class IcpConfig:
    max_outer_iters: int = 10
    conv_rot: float = math.radians(0.5)
    conv_trans: float | None = None
    gating: GatingThresholds = field(default_factory=GatingThresholds)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    r_b: float = 0.025
    interp_k: int = 4
    mode: str = "nn"
    rebuild_graph: bool = True
    lowe_ratio: float = 0.8
    use_keypoints: bool = True
    workers: int = 1
    sigma_def: float | None = None

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if not (self.conv_rot > 0 and self.r_b > 0):
            raise ValueError("thresholds must be positive")
        if self.conv_trans is not None and not self.conv_trans > 0:
            raise ValueError("thresholds must be positive")
        if self.mode not in ("nn", "projective"):
            raise ValueError(f"unknown correspondence mode {self.mode!r}")

    @property
    def translation_tolerance(self) -> float:
        return self.conv_trans if self.conv_trans is not None else self.r_b / 25.0


@dataclass
class IterationStats:
    n_dense: int
    n_sparse: int
    energies: list[float]
    max_rotation: float
    max_translation: float

    @property
    def objective(self) -> float:
        return self.energies[-1]


@dataclass
class RegistrationResult:
    warp: DenseWarp
    graph_final: DeformationGraph
    params_final: np.ndarray
    iterations_used: int
    final_objective: float
    per_iter_stats: list[IterationStats]
    converged: bool


def _node_motion(graph: DeformationGraph, params: np.ndarray) -> tuple[float, float]:
    T = graph.node_transforms(params)
    ang = rotation_angle(T.rotations)
    disp = np.linalg.norm(T.apply(graph.nodes) - graph.nodes, axis=1)
    return float(ang.max()), float(disp.max())


class _FixedGraph:
    """Keeps the voxel membership of the first graph and moves its nodes to
    the centroids of their warped member points."""

    def __init__(self, source: OrientedPointCloud, cfg: IcpConfig):
        self.members = build_graph(source, cfg.r_b, cfg.interp_k, cfg.workers,
                                   cfg.sigma_def).members
        self.count = np.bincount(self.members).astype(np.float64)
        self.cfg = cfg

    def at(self, warped: OrientedPointCloud) -> DeformationGraph:
        nodes = np.stack([np.bincount(self.members, weights=warped.points[:, a])
                          for a in range(3)], axis=1) / self.count[:, None]
        return graph_from_nodes(nodes, self.cfg.r_b, self.cfg.interp_k, self.members,
                                self.cfg.workers, self.cfg.sigma_def)


def register(source: OrientedPointCloud, target: OrientedPointCloud | DepthFrame,
             initial: DenseWarp | None = None, cfg: IcpConfig | None = None,
             sparse_matches=None) -> RegistrationResult:
    """Warp ``source`` toward ``target``.

    ``target`` may be a depth frame when ``cfg.mode == "projective"``.
    ``sparse_matches`` optionally fixes the keypoint pairing (rows of
    keypoint positions) instead of descriptor matching.
    """
    cfg = cfg or IcpConfig()
    frame = None
    if isinstance(target, DepthFrame):
        frame = target
        target = depth_to_cloud(frame)
    if len(source) == 0 or len(target) == 0:
        raise RegistrationError("empty point set")
    if cfg.mode == "projective" and frame is None:
        raise RegistrationError("projective mode needs a target depth frame")

    W = initial if initial is not None else DenseWarp.identity(len(source))
    if len(W) != len(source):
        raise RegistrationError("initial warp does not match the source size")
    target_index = SpatialIndex(target.points, workers=cfg.workers)
    if (sparse_matches is None and cfg.use_keypoints
            and source.keypoints is not None and target.keypoints is not None):
        sparse_matches = match_descriptors(source.keypoints.descriptors,
                                           target.keypoints.descriptors, cfg.lowe_ratio)
    fixed = None if cfg.rebuild_graph else _FixedGraph(source, cfg)

    stats: list[IterationStats] = []
    graph = None
    params = None
    converged = False
    for it in range(cfg.max_outer_iters):
        warped = W.apply_cloud(source)
        if cfg.mode == "projective":
            dense = find_dense_projective(warped, frame, cfg.gating, target)
        else:
            dense = find_dense_nn(warped, target, target_index, cfg.gating)
        sparse = (match_keypoints(warped, target, cfg.gating, matches=sparse_matches)
                  if sparse_matches is not None else np.zeros((0, 2), dtype=np.int64))
        corr = CorrespondenceSet(dense, sparse)
        graph = fixed.at(warped) if fixed else build_graph(warped, cfg.r_b, cfg.interp_k,
                                                            cfg.workers, cfg.sigma_def)
        try:
            prob = RegistrationProblem(graph, warped, target, corr, cfg.objective)
        except NoConstraintsError as exc:
            raise RegistrationError(f"outer iteration {it}: {exc}") from exc
        gn = gauss_newton(graph, graph.identity_params(), warped, target, corr,
                          cfg.objective, problem=prob)
        params = gn.params
        W = compose(graph_to_dense(graph, params, warped), W)
        rot, trans = _node_motion(graph, params)
        stats.append(IterationStats(len(dense), len(sparse), gn.energies, rot, trans))
        log.debug("icp iter %d: dense=%d sparse=%d E=%.3e->%.3e rot=%.2e trans=%.2e",
                  it, len(dense), len(sparse), gn.energies[0], gn.energies[-1], rot, trans)
        if rot < cfg.conv_rot and trans < cfg.translation_tolerance:
            converged = True
            break
    return RegistrationResult(W, graph, params, len(stats), stats[-1].objective, stats,
                              converged)


def register_bidirectional(source: OrientedPointCloud, target: OrientedPointCloud,
                           cfg: IcpConfig | None = None):
    """Forward (source->target) and backward (target->source) registrations.

    Returns the two :class:`RegistrationResult` objects; the backward graph
    is built over ``target``.
    """
    cfg = cfg or IcpConfig()

    def run(direction, a, b):
        try:
            return register(a, b, cfg=cfg)
        except RegistrationError as exc:
            raise RegistrationError(f"{direction}: {exc}") from exc

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            f = pool.submit(run, "forward", source, target)
            b = pool.submit(run, "backward", target, source)
            return f.result(), b.result()
    return run("forward", source, target), run("backward", target, source)

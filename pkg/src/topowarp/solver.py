"""Gauss-Newton minimization of the registration energy over node parameters.

Energy = sum of squared rows:

* point-to-plane rows ``n_j . (W(x_i) - y_j)`` for dense pairs,
* ``sqrt(lambda_point) * (W(x_i) - y_j)`` rows for sparse pairs,
* square-rooted Huber rows ``sqrt(lambda_stiff * w_ij) * s(theta_i - theta_j)``
  for every node and each of its ``reg_k`` nearest nodes, where
  ``s(x)**2 == 2 * huber(x, delta)``.

Interpolation weights are fixed by the (already warped) source positions, so
they are constants of the linearization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp

from .correspondence import CorrespondenceSet
from .geometry import OrientedPointCloud, euler_rotation_derivatives, euler_to_rotation
from .warp import DeformationGraph, interpolation_weights

log = logging.getLogger(__name__)

TAG_PLANE, TAG_POINT, TAG_STIFF = 0, 1, 2


class NoConstraintsError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_point: float = 2.0
    lambda_stiff: float = 200.0
    huber_delta: float = 1e-4
    reg_k: int = 6
    max_gn_iters: int = 5
    cg_max_iters: int | None = None
    cg_tol: float = 1e-6
    step_control: bool = True
    max_halvings: int = 8
    damping: float = 0.0

    def __post_init__(self):
        if self.lambda_point < 0 or self.lambda_stiff < 0:
            raise ValueError("term weights must be non-negative")
        if not self.huber_delta > 0:
            raise ValueError("huber delta must be positive")
        if self.reg_k < 1:
            raise ValueError("reg_k must be >= 1")
        if self.max_gn_iters < 1:
            raise ValueError("max_gn_iters must be >= 1")

    def cg_iters_for(self, num_params: int) -> int:
        if self.cg_max_iters:
            return self.cg_max_iters
        return int(math.ceil(10.0 * math.sqrt(num_params)))


def huber(x, delta: float):
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * ax * ax, delta * (ax - 0.5 * delta))


def huber_sqrt(x, delta: float):
    """Signed square root ``s`` with ``s**2 == 2 * huber(x, delta)``, and ``ds/dx``."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    lin = ax > delta
    s = np.where(lin, np.sign(x) * np.sqrt(np.maximum(2.0 * delta * ax - delta * delta, 0.0)), x)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ds = np.where(lin, delta / np.abs(s), 1.0)
    return s, ds


def huber_sqrt_weight(x, delta: float):
    """IRLS-style factor ``w`` with ``(w * x)**2 == 2 * huber(x, delta)``."""
    x = np.asarray(x, dtype=np.float64)
    s, _ = huber_sqrt(x, delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x == 0, 1.0, s / x)


@dataclass
class ResidualSystem:
    jacobian: sp.csr_matrix
    residuals: np.ndarray
    tags: np.ndarray

    @property
    def energy(self) -> float:
        return float(self.residuals @ self.residuals)


def regularization_edges(graph: DeformationGraph, reg_k: int):
    """Directed edges ``(i, j)`` from each node to its ``reg_k`` nearest others."""
    G = len(graph)
    k = min(reg_k, G - 1)
    if k < 1:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    idx, dist = graph.index.knn(graph.nodes, k + 1)
    src = np.repeat(np.arange(G), k + 1).reshape(G, k + 1)
    not_self = idx != src
    # a node is its own nearest neighbour; drop it and keep k others
    keep = np.zeros_like(not_self)
    order = np.cumsum(not_self, axis=1)
    keep[not_self & (order <= k)] = True
    i, j, d = src[keep], idx[keep], dist[keep]
    w = np.exp(-(d * d) / (2.0 * graph.sigma ** 2))
    return i, j, w


class RegistrationProblem:
    """Residuals and Jacobian for one linearization site (fixed S, D, C)."""

    def __init__(self, graph: DeformationGraph, source: OrientedPointCloud,
                 target: OrientedPointCloud, corr: CorrespondenceSet,
                 cfg: ObjectiveConfig):
        if len(corr.dense) == 0 and len(corr.sparse) == 0:
            raise NoConstraintsError("no constraints")
        self.graph, self.cfg = graph, cfg
        self.G = len(graph)
        self.dense = corr.dense
        self.sparse = corr.sparse
        src_ids = np.unique(np.concatenate([corr.dense[:, 0], corr.sparse[:, 0]]))
        nidx, nw = interpolation_weights(graph, source.points[src_ids])
        lookup = np.full(len(source), -1, dtype=np.int64)
        lookup[src_ids] = np.arange(len(src_ids))
        self.x = source.points[src_ids]
        self.nidx, self.nw = nidx, nw
        self.d_row = lookup[corr.dense[:, 0]]
        self.d_target = target.points[corr.dense[:, 1]]
        self.d_normal = target.normals[corr.dense[:, 1]]
        self.s_row = lookup[corr.sparse[:, 0]]
        self.s_target = target.points[corr.sparse[:, 1]]
        self.ei, self.ej, self.ew = regularization_edges(graph, cfg.reg_k)
        self.sqrt_point = math.sqrt(cfg.lambda_point)
        self.edge_scale = np.sqrt(cfg.lambda_stiff * self.ew)
        self.n_plane = len(self.dense)
        self.n_point = 3 * len(self.sparse)
        self.n_stiff = 6 * len(self.ei)
        self.tags = np.concatenate([
            np.full(self.n_plane, TAG_PLANE, dtype=np.uint8),
            np.full(self.n_point, TAG_POINT, dtype=np.uint8),
            np.full(self.n_stiff, TAG_STIFF, dtype=np.uint8)])

    @property
    def num_params(self) -> int:
        return 6 * self.G

    def _warp_sites(self, params):
        theta = np.einsum("nk,nkp->np", self.nw, params[self.nidx])
        R = euler_to_rotation(theta[:, :3])
        y = np.einsum("nij,nj->ni", R, self.x) + theta[:, 3:]
        return theta, y

    def residuals(self, params) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64).reshape(self.G, 6)
        _, y = self._warp_sites(params)
        r_plane = np.sum(self.d_normal * (y[self.d_row] - self.d_target), axis=1)
        r_point = (self.sqrt_point * (y[self.s_row] - self.s_target)).reshape(-1)
        diff = params[self.ei] - params[self.ej]
        s, _ = huber_sqrt(diff, self.cfg.huber_delta)
        r_stiff = (self.edge_scale[:, None] * s).reshape(-1)
        return np.concatenate([r_plane, r_point, r_stiff])

    def energy(self, params) -> float:
        r = self.residuals(params)
        return float(r @ r)

    def system(self, params) -> ResidualSystem:
        params = np.asarray(params, dtype=np.float64).reshape(self.G, 6)
        theta, y = self._warp_sites(params)
        dR = euler_rotation_derivatives(theta[:, :3])
        # dy/dtheta per site: (N, 3 coords, 6 params)
        dy = np.empty((len(self.x), 3, 6))
        dy[:, :, :3] = np.einsum("nkij,nj->nik", dR, self.x)
        dy[:, :, 3:] = np.eye(3)
        rows, cols, vals = [], [], []

        # point-to-plane
        g_plane = np.einsum("ni,nip->np", self.d_normal, dy[self.d_row])
        r_plane = np.sum(self.d_normal * (y[self.d_row] - self.d_target), axis=1)
        if self.n_plane:
            w = self.nw[self.d_row]                               # (P, k)
            nodes = self.nidx[self.d_row]
            v = w[:, :, None] * g_plane[:, None, :]                # (P, k, 6)
            c = 6 * nodes[:, :, None] + np.arange(6)
            r = np.broadcast_to(np.arange(self.n_plane)[:, None, None], c.shape)
            rows.append(r.ravel()); cols.append(c.ravel()); vals.append(v.ravel())

        # point-to-point
        off = self.n_plane
        r_point = (self.sqrt_point * (y[self.s_row] - self.s_target)).reshape(-1)
        if len(self.sparse):
            w = self.nw[self.s_row]
            nodes = self.nidx[self.s_row]
            g = self.sqrt_point * dy[self.s_row]                   # (Q, 3, 6)
            v = w[:, None, :, None] * g[:, :, None, :]             # (Q, 3, k, 6)
            c = np.broadcast_to((6 * nodes[:, None, :, None] + np.arange(6)), v.shape)
            r = np.broadcast_to(off + 3 * np.arange(len(self.sparse))[:, None, None, None]
                                + np.arange(3)[None, :, None, None], v.shape)
            rows.append(r.ravel()); cols.append(c.ravel()); vals.append(v.ravel())

        # stiffness
        off += self.n_point
        diff = params[self.ei] - params[self.ej]
        s, ds = huber_sqrt(diff, self.cfg.huber_delta)
        r_stiff = (self.edge_scale[:, None] * s).reshape(-1)
        if len(self.ei):
            e = len(self.ei)
            dv = self.edge_scale[:, None] * ds                     # (E, 6)
            r = off + np.arange(6 * e)
            ci = (6 * self.ei[:, None] + np.arange(6)).ravel()
            cj = (6 * self.ej[:, None] + np.arange(6)).ravel()
            rows += [r, r]; cols += [ci, cj]; vals += [dv.ravel(), -dv.ravel()]

        n_rows = self.n_plane + self.n_point + self.n_stiff
        J = sp.csr_matrix(
            (np.concatenate(vals) if vals else np.zeros(0),
             (np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64),
              np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64))),
            shape=(n_rows, self.num_params))
        return ResidualSystem(J, np.concatenate([r_plane, r_point, r_stiff]), self.tags)


def build_system(graph: DeformationGraph, node_params, source: OrientedPointCloud,
                 target: OrientedPointCloud, corr: CorrespondenceSet,
                 cfg: ObjectiveConfig) -> ResidualSystem:
    return RegistrationProblem(graph, source, target, corr, cfg).system(node_params)


class PCGResult(NamedTuple):
    x: np.ndarray
    iterations: int
    relative_residual: float
    converged: bool


def pcg_solve(A_apply: Callable[[np.ndarray], np.ndarray], b, precond_diag,
              tol: float = 1e-6, max_iters: int = 1000, x0=None) -> PCGResult:
    """Conjugate gradients with a Jacobi (diagonal) preconditioner."""
    b = np.asarray(b, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return PCGResult(np.zeros_like(b), 0, 0.0, True)
    inv_diag = 1.0 / np.maximum(np.asarray(precond_diag, dtype=np.float64), 1e-12)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - A_apply(x) if x0 is not None else b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    rel = float(np.linalg.norm(r)) / bnorm
    it = 0
    while rel > tol and it < max_iters:
        Ap = A_apply(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rel = float(np.linalg.norm(r)) / bnorm
        if rel <= tol:
            break
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return PCGResult(x, it, rel, rel <= tol)


@dataclass
class GNResult:
    params: np.ndarray
    energies: list[float] = field(default_factory=list)
    accepted_steps: int = 0
    cg_iterations: list[int] = field(default_factory=list)

    @property
    def energy(self) -> float:
        return self.energies[-1]


def gauss_newton(graph: DeformationGraph, node_params0, source: OrientedPointCloud,
                 target: OrientedPointCloud, corr: CorrespondenceSet,
                 cfg: ObjectiveConfig, problem: RegistrationProblem | None = None) -> GNResult:
    """Gauss-Newton with PCG inner solves.

    ``energies`` starts with the initial energy and gains one entry per
    accepted step. With ``step_control`` a step that raises the energy is
    halved up to ``max_halvings`` times and otherwise rejected, which ends
    the iteration.
    """
    prob = problem or RegistrationProblem(graph, source, target, corr, cfg)
    params = np.array(node_params0, dtype=np.float64).reshape(len(graph), 6)
    sys_ = prob.system(params)
    result = GNResult(params, [sys_.energy])
    cg_iters = cfg.cg_iters_for(prob.num_params)
    for _ in range(cfg.max_gn_iters):
        J = sys_.jacobian
        JT = J.T.tocsr()
        A = (JT @ J).tocsr()
        diag = A.diagonal()
        if cfg.damping > 0:
            A = A + sp.diags(cfg.damping * diag)
            diag = A.diagonal()
        b = -(JT @ sys_.residuals)
        sol = pcg_solve(A.dot, b, diag, cfg.cg_tol, cg_iters)
        result.cg_iterations.append(sol.iterations)
        step = sol.x.reshape(-1, 6)
        if not np.any(step):
            break
        e0 = result.energies[-1]
        scale = 1.0
        new = params + step
        e_new = prob.energy(new)
        if cfg.step_control:
            halvings = 0
            while not e_new <= e0 and halvings < cfg.max_halvings:
                scale *= 0.5
                halvings += 1
                new = params + scale * step
                e_new = prob.energy(new)
            if not e_new <= e0:
                log.debug("gauss-newton step rejected after %d halvings", halvings)
                break
        params = new
        sys_ = prob.system(params)
        result.energies.append(sys_.energy)
        result.accepted_steps += 1
        if e0 - sys_.energy <= 1e-14 * max(e0, 1e-300):
            break
    result.params = params
    return result

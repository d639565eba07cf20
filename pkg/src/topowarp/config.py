"""Run configuration: ``key = value`` lines, ``#`` comments, typed validation.

Keys whose default is ``auto`` are derived from others (``sigma_def = r_b/2``,
``conv_trans = r_b/25``, CG cap from the parameter count).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .correspondence import GatingThresholds
from .icp import IcpConfig
from .solver import ObjectiveConfig
from .topology import TopologyConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # deformation graph
    r_b: float = 0.025
    sigma_def: float | None = None
    interp_k: int = 4
    rebuild_graph: bool = True
    # objective and solver
    lambda_point: float = 2.0
    lambda_stiff: float = 200.0
    huber_delta: float = 1e-4
    reg_k: int = 6
    max_gn_iters: int = 5
    cg_max_iters: int | None = None
    cg_tol: float = 1e-6
    step_control: bool = True
    damping: float = 0.0
    # icp loop
    max_outer_iters: int = 10
    conv_rot_deg: float = 0.5
    conv_trans: float | None = None
    correspondence_mode: str = "nn"
    # correspondence gating
    theta_d: float = 0.15
    theta_n_deg: float = 15.0
    theta_c: float = 0.4
    lowe_ratio: float = 0.8
    use_keypoints: bool = True
    # topology
    rho_s: float = 0.015
    tau: float = 2.2
    alpha: float = 1.5
    rho_e: float = 0.075
    cluster_dist: float = 0.02
    min_event_points: int = 75
    blend_clustered: bool = False
    # evaluation and input
    dz_occ: float = 0.01
    event_rho: float = 0.03
    event_dt_max: float = 2.0
    event_min_overlap: float = 0.2
    depth_cutoff: float = 5.0
    normal_k: int = 30

    def __post_init__(self):
        positive = ("r_b", "huber_delta", "cg_tol", "conv_rot_deg", "theta_d", "theta_n_deg",
                    "theta_c", "rho_s", "tau", "rho_e", "cluster_dist", "dz_occ", "event_rho",
                    "depth_cutoff", "lowe_ratio")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("sigma_def", "conv_trans"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_point", "lambda_stiff", "damping", "event_dt_max", "event_min_overlap"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("interp_k", "reg_k", "max_gn_iters", "max_outer_iters", "min_event_points",
                     "normal_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.cg_max_iters is not None and self.cg_max_iters < 1:
            raise ConfigError("cg_max_iters must be >= 1")
        if self.alpha < 1:
            raise ConfigError("alpha must be >= 1")
        if self.correspondence_mode not in ("nn", "projective"):
            raise ConfigError("correspondence_mode must be 'nn' or 'projective'")

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.lambda_point, self.lambda_stiff, self.huber_delta, self.reg_k,
                               self.max_gn_iters, self.cg_max_iters, self.cg_tol,
                               self.step_control, damping=self.damping)

    def icp(self, workers: int = 1) -> IcpConfig:
        gating = GatingThresholds(self.theta_d, math.radians(self.theta_n_deg), self.theta_c)
        return IcpConfig(self.max_outer_iters, math.radians(self.conv_rot_deg), self.conv_trans,
                         gating, self.objective(), self.r_b, self.interp_k,
                         self.correspondence_mode, self.rebuild_graph, self.lowe_ratio,
                         self.use_keypoints, workers, self.sigma_def)

    def topology(self, enabled: bool = True) -> TopologyConfig:
        return TopologyConfig(self.rho_s, self.tau, self.alpha, self.rho_e, self.cluster_dist,
                              self.min_event_points, self.blend_clustered, enabled)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                s = "auto"
            elif isinstance(v, bool):
                s = "true" if v else "false"
            else:
                s = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}
_AUTO = {"sigma_def", "cg_max_iters", "conv_trans"}
_INTS = {"interp_k", "reg_k", "max_gn_iters", "cg_max_iters", "max_outer_iters",
         "min_event_points", "normal_k"}
_BOOLS = {"rebuild_graph", "step_control", "use_keypoints", "blend_clustered"}
_STRS = {"correspondence_mode"}


def _convert(key: str, text: str):
    if text == "auto":
        if key not in _AUTO:
            raise ConfigError(f"{key} does not accept 'auto'")
        return None
    if key in _BOOLS:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key} expects a boolean, got {text!r}")
    if key in _STRS:
        return text
    try:
        if key in _INTS:
            return int(text)
        value = float(text)
    except ValueError as exc:
        kind = "an integer" if key in _INTS else "a number"
        raise ConfigError(f"{key} expects {kind}, got {text!r}") from exc
    if not math.isfinite(value):
        raise ConfigError(f"{key} must be finite")
    return value


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{n}: {exc}") from None
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)

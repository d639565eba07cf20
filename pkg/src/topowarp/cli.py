"""Command line entry point.

Exit codes: 0 success, 1 processing error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .camera import DepthFrame, depth_to_cloud
from .config import ConfigError, RunConfig, load_config
from .evaluation import Flow2D, frame_flow, flow_report, match_events, separation_registration_error
from .icp import RegistrationError, register
from .synthetic import KINDS, generate_scene
from .topology import topology_aware_register
from .warp import DenseWarp

log = logging.getLogger("topowarp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _valid_flags(parser: argparse.ArgumentParser) -> str:
    flags = sorted(s for a in parser._actions for s in a.option_strings)
    return ", ".join(flags)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def _load_config(args) -> RunConfig:
    return load_config(_require(args.config)) if args.config else RunConfig()


def _load_input(path, cfg: RunConfig):
    """A PLY cloud, or a depth PNG (with sidecar) turned into a cloud."""
    p = _require(path)
    if p.suffix.lower() == ".png":
        frame = io.load_depth(p, cfg.depth_cutoff)
        return depth_to_cloud(frame, normal_k=cfg.normal_k), frame
    try:
        return io.load_ply(p), None
    except io.PlyError as exc:
        raise io.PlyError(f"{p}: {exc}") from exc


def _parse_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if "," in text:
        return tuple(float(v) for v in text.split(","))
    return text


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_register(args) -> int:
    cfg = _load_config(args)
    source, _ = _load_input(args.source, cfg)
    target, target_frame = _load_input(args.target, cfg)
    icp_cfg = cfg.icp(workers=args.threads)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.correspondence_mode == "projective":
        if target_frame is None:
            raise RegistrationError("projective mode needs a depth image target")
        if args.mode == "fb":
            raise RegistrationError("fb mode needs nearest-neighbor correspondences")
        result = register(source, target_frame, cfg=icp_cfg)
        warp, events = result.warp, None
    elif args.mode == "f":
        warp, events = register(source, target, cfg=icp_cfg).warp, None
    else:
        res = topology_aware_register(source, target, icp_cfg, cfg.topology(), args.timestamp)
        warp, events = res.warp, res.events
    warp.save(out / "warp.dwrp")
    io.save_ply(out / "warped.ply", warp.apply_cloud(source))
    if events is not None:
        io.save_events(out / "events.jsonl", events)
    summary = {"mode": args.mode, "source_points": len(source), "target_points": len(target)}
    if events is not None:
        summary["contacts"] = sum(e.label == "contact" for e in events)
        summary["separations"] = sum(e.label == "separation" for e in events)
    print(io.metrics_line(summary))
    return 0


def cmd_eval_flow(args) -> int:
    cfg = _load_config(args)
    frame = io.load_depth(_require(args.source_depth), cfg.depth_cutoff)
    warp = DenseWarp.load(_require(args.warp))
    gt_flow, gt_valid = io.load_flow(_require(args.gt_flow))
    est = frame_flow(frame, warp)
    report = {"sequence": args.sequence, "frame": args.frame}
    report.update(flow_report(est, Flow2D(gt_flow, gt_valid)))
    line = io.metrics_line(report)
    if args.output:
        io.append_metrics(args.output, report)
    print(line)
    return 0


def cmd_eval_events(args) -> int:
    cfg = _load_config(args)
    gt = io.load_events(_require(args.gt))
    det = io.load_events(_require(args.det))
    rho = args.rho if args.rho is not None else cfg.event_rho
    dt = args.dt_max if args.dt_max is not None else cfg.event_dt_max
    ov = args.min_overlap if args.min_overlap is not None else cfg.event_min_overlap
    report = match_events(gt, det, rho, dt, ov).as_dict()
    if args.output:
        io.append_metrics(args.output, report)
    print(io.metrics_line(report))
    return 0


def cmd_eval_sep(args) -> int:
    cfg = _load_config(args)
    source = io.load_ply(_require(args.source))
    target = io.load_ply(_require(args.target))
    depth = io.load_depth(_require(args.target_depth), depth_cutoff=float("inf"))
    warp = DenseWarp.load(_require(args.warp))
    if len(warp) != len(source):
        raise ValueError(f"{args.warp}: warp has {len(warp)} transforms, source has {len(source)}")
    mask = np.zeros(len(source), dtype=bool)
    for ev in io.load_events(_require(args.events)):
        if ev.label != "separation":
            continue
        if ev.indices is None:
            raise ValueError(f"{args.events}: events need point indices for masking")
        mask[ev.indices] = True
    dz = args.dz_occ if args.dz_occ is not None else cfg.dz_occ
    err = separation_registration_error(source, target, depth, warp, mask, dz)
    report = {"registration_error_mm": err, "mask_points": int(mask.sum())}
    if args.output:
        io.append_metrics(args.output, report)
    print(io.metrics_line(report))
    return 0


def cmd_synth(args) -> int:
    params = {}
    for item in args.param or []:
        if "=" not in item:
            raise UsageError(f"synth: --param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        params[k.strip()] = _parse_value(v.strip())
    scene = generate_scene(args.kind, params, args.seed)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    io.save_ply(out / "source.ply", scene.source)
    io.save_ply(out / "target.ply", scene.target)
    scene.gt_warp.save(out / "gt_warp.dwrp")
    io.save_events(out / "gt_events.jsonl", scene.gt_events)
    frame: DepthFrame = scene.target_frame()
    io.save_depth(out / "target_depth.png", frame)
    meta = {"kind": scene.kind, "seed": args.seed,
            "labels": scene.gt_segment_labels.tolist(),
            "correspondence": scene.gt_correspondence.tolist(),
            "params": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                       for k, v in scene.params.items()}}
    (out / "scene.json").write_text(json.dumps(meta) + "\n")
    print(io.metrics_line({"kind": scene.kind, "seed": args.seed,
                           "source_points": len(scene.source),
                           "target_points": len(scene.target)}))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="topowarp", description="Topology-aware non-rigid point cloud registration.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, output_required=True, output_help="output path"):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int, default=0, help="random seed")
        sp.add_argument("--threads", type=int, default=1,
                        help="worker threads (1 gives bit-identical output)")
        sp.add_argument("-o", "--output", required=output_required, help=output_help)

    r = sub.add_parser("register", help="register two clouds (PLY or depth PNG)")
    r.add_argument("source")
    r.add_argument("target")
    r.add_argument("--mode", choices=("f", "fb"), default="fb",
                   help="f: forward warp only; fb: topology-aware blend")
    r.add_argument("--timestamp", type=int, default=0, help="frame index stored in events")
    common(r, output_help="output directory")
    r.set_defaults(func=cmd_register)

    f = sub.add_parser("eval-flow", help="EPE/AE of a warp against ground-truth flow")
    f.add_argument("--source-depth", required=True)
    f.add_argument("--warp", required=True)
    f.add_argument("--gt-flow", required=True)
    f.add_argument("--sequence", default="")
    f.add_argument("--frame", type=int, default=0)
    common(f, output_required=False, output_help="append the report to this JSONL file")
    f.set_defaults(func=cmd_eval_flow)

    e = sub.add_parser("eval-events", help="match detected events against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--det", required=True)
    e.add_argument("--rho", type=float)
    e.add_argument("--dt-max", type=float)
    e.add_argument("--min-overlap", type=float)
    common(e, output_required=False, output_help="append the report to this JSONL file")
    e.set_defaults(func=cmd_eval_events)

    s = sub.add_parser("synth", help="generate a synthetic scene pair")
    s.add_argument("--kind", choices=KINDS, required=True)
    s.add_argument("--param", action="append", help="scene parameter key=value (repeatable)")
    common(s, output_help="output directory")
    s.set_defaults(func=cmd_synth)

    q = sub.add_parser("eval-sep", help="occlusion-filtered registration error at separations")
    q.add_argument("--source", required=True)
    q.add_argument("--target", required=True)
    q.add_argument("--target-depth", required=True)
    q.add_argument("--warp", required=True)
    q.add_argument("--events", required=True, help="ground-truth events (mask)")
    q.add_argument("--dz-occ", type=float)
    common(q, output_required=False, output_help="append the report to this JSONL file")
    q.set_defaults(func=cmd_eval_sep)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("topowarp: a subcommand is required "
                             "(register, eval-flow, eval-events, synth, eval-sep)")
        if extra:
            sp = parser._subparsers._group_actions[0].choices[args.command]
            raise UsageError(f"{sp.prog}: unrecognized arguments: {' '.join(extra)}; "
                             f"valid flags: {_valid_flags(sp)}")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RegistrationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line interface for usm.

Usage examples::

    # Render a three-view synthetic scene of the unit sphere
    usm synth --out scene/ --shape sphere --views 3 --noise 0 --seed 42

    # Fit shape, pose and uncertainty; keep the loss curve
    usm fit --scene scene/ --iters 200 --lr 0.005 --out result.json --history history.csv

    # Expected depth and its standard deviation for view 0
    usm render --result result.json --scene scene/ --view 0 --depth d.pfm --std s.pfm

    # Marching-Cubes mesh of the fitted shape
    usm mesh --result result.json --out shape.obj --resolution 64

    # Metrics against the scene's ground truth, then aggregate rates
    usm eval --result result.json --scene scene/ --metrics metrics.csv --scatter scatter.csv
    usm summary metrics.csv
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, NoReturn, Optional

import numpy as np
import torch

from . import __version__
from .config import RunConfig, load_config
from .decoder import build_decoder
from .errors import ConfigError, InvalidInputError, NumericalAbortError, UsmError
from .evaluation import (
    MESH_BOUND,
    ObjectMetrics,
    ShapeInstance,
    chamfer,
    detection_rates,
    extract_mesh,
    iou_3d,
    pose_correct,
    pose_error,
    sample_mesh_surface,
    sample_shape_surface,
    uncertainty_correlation,
)
from .geometry import Pose9, log_pose, parse_pose_text, transform_point
from .ingestion import load_scene
from .optimizer import fit
from .renderer import RayBounds, beta_moment_match, render_depth_map
from .storage import (
    append_metrics_csv,
    load_mesh,
    load_result_json,
    read_metrics_csv,
    save_beta_csv,
    save_history_csv,
    save_obj,
    save_result_json,
    save_scatter_csv,
    write_pfm,
)
from .synth import SynthSpec, generate_scene

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


# ── Presentation ──────────────────────────────────────────────────────────────


def _print_summary(title: str, rows: Dict[str, object], paths: Optional[Dict[str, object]] = None) -> None:
    sep = "=" * 60
    print(f"\n{sep}")
    print(f"  {title}")
    print(sep)
    for label, value in rows.items():
        print(f"  {label:<18s}: {value}")
    print(sep)
    if paths:
        print("  Output files:")
        for kind, path in paths.items():
            print(f"    {kind.upper():8s}: {path}")
        print(sep)
    print()


def _fmt(value: Optional[float], spec: str = ".4f") -> str:
    return "n/a" if value is None else format(value, spec)


# ── CLI definition ────────────────────────────────────────────────────────────


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors to :func:`main` instead of exiting."""

    def error(self, message: str) -> NoReturn:
        raise _UsageError(f"{self.prog}: error: {message}")


def _floats(text: str, count: int, what: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be {count} comma-separated numbers") from None
    if len(values) != count:
        raise argparse.ArgumentTypeError(f"{what} must be {count} comma-separated numbers, got {len(values)}")
    return values


def _shape_arg(text: str) -> List[float]:
    """``sphere`` or ``ellipsoid:z0,z1,z2`` (leading latent entries)."""
    if text == "sphere":
        return [0.0, 0.0, 0.0]
    if text.startswith("ellipsoid:"):
        return _floats(text[len("ellipsoid:"):], 3, "ellipsoid latent")
    raise argparse.ArgumentTypeError("shape must be 'sphere' or 'ellipsoid:z0,z1,z2'")


def _pose_arg(text: str) -> Pose9:
    v = _floats(text, 9, "pose")
    return Pose9.from_vector(v)


def _common_options() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    misc = common.add_argument_group("miscellaneous")
    misc.add_argument("--config", "-c", metavar="PATH", default="config.yaml",
                      help="Path to YAML configuration file (default: config.yaml).")
    misc.add_argument("--seed", type=int, metavar="K", help="Random seed (overrides config).")
    misc.add_argument("--threads", type=int, metavar="N",
                      help="Worker thread cap (overrides USM_THREADS and config).")
    misc.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                      help="Logging verbosity (overrides config).")
    misc.add_argument("--log-file", metavar="PATH", help="Also write logs to PATH.")
    return common


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="usm",
        description="Shape, 9-DoF pose and uncertainty reconstruction from multi-view depth.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", "-V", action="version", version=f"%(prog)s {__version__}")
    common = _common_options()
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    # ── synth ──────────────────────────────────────────────────────────────────
    p = sub.add_parser("synth", parents=[common], help="Write a synthetic multi-view scene.")
    g = p.add_argument_group("scene settings")
    g.add_argument("--out", "-o", metavar="DIR", required=True, help="Output scene directory.")
    g.add_argument("--shape", type=_shape_arg, default=[0.0, 0.0, 0.0], metavar="SHAPE",
                   help="'sphere' (default) or 'ellipsoid:z0,z1,z2'.")
    g.add_argument("--pose", type=_pose_arg, metavar="T,PHI,S",
                   help="Ground-truth pose as nine comma-separated values tx,ty,tz,rx,ry,rz,sx,sy,sz.")
    g.add_argument("--views", type=int, metavar="N", help="Number of ring cameras (overrides config).")
    g.add_argument("--noise", type=float, metavar="SIGMA", help="Depth noise in meters (overrides config).")
    g.add_argument("--radius", type=float, metavar="M", help="Camera ring radius (overrides config).")
    g.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="Image size in pixels.")
    g.add_argument("--focal", type=float, metavar="PX", help="Focal length in pixels.")

    # ── fit ────────────────────────────────────────────────────────────────────
    p = sub.add_parser("fit", parents=[common], help="Fit shape, pose and uncertainty to a scene.")
    g = p.add_argument_group("optimisation settings")
    g.add_argument("--scene", "-s", metavar="DIR", required=True, help="Scene directory or manifest.")
    g.add_argument("--out", "-o", metavar="PATH", required=True, help="Result JSON path.")
    g.add_argument("--history", metavar="PATH", help="Loss-history CSV path.")
    g.add_argument("--iters", type=int, metavar="N", help="Adam iterations (overrides config).")
    g.add_argument("--lr", type=float, metavar="RATE", help="Adam learning rate (overrides config).")
    g.add_argument("--decoder", metavar="SEL", help="'analytic' or 'mlp:<path>' (overrides config).")
    g.add_argument("--lambda-s", type=float, metavar="W", help="3D loss weight.")
    g.add_argument("--lambda-r", type=float, metavar="W", help="2D loss weight.")
    g.add_argument("--lambda-c", type=float, metavar="W", help="Latent regulariser weight.")
    g.add_argument("--init-pose", metavar="PATH", help="Pose text file replacing ICP initialisation.")

    # ── render ─────────────────────────────────────────────────────────────────
    p = sub.add_parser("render", parents=[common], help="Render expected depth and its deviation.")
    g = p.add_argument_group("render settings")
    g.add_argument("--result", "-r", metavar="PATH", required=True, help="Result JSON from 'usm fit'.")
    g.add_argument("--scene", "-s", metavar="DIR", required=True, help="Scene providing the camera.")
    g.add_argument("--view", type=int, default=0, metavar="K", help="Frame index (default: 0).")
    g.add_argument("--depth", metavar="PATH", required=True, help="Output PFM of expected depth.")
    g.add_argument("--std", metavar="PATH", required=True, help="Output PFM of depth standard deviation.")
    g.add_argument("--beta-csv", metavar="PATH", help="Per-pixel Beta moment-match diagnostics.")

    # ── mesh ───────────────────────────────────────────────────────────────────
    p = sub.add_parser("mesh", parents=[common], help="Extract a Marching-Cubes mesh.")
    g = p.add_argument_group("mesh settings")
    g.add_argument("--result", "-r", metavar="PATH", required=True, help="Result JSON from 'usm fit'.")
    g.add_argument("--out", "-o", metavar="PATH", required=True, help="Output OBJ path.")
    g.add_argument("--resolution", type=int, default=64, metavar="N", help="Grid size per axis (default: 64).")
    g.add_argument("--world", action="store_true", help="Place the mesh with the fitted pose.")

    # ── eval ───────────────────────────────────────────────────────────────────
    p = sub.add_parser("eval", parents=[common], help="Score a result against scene ground truth.")
    g = p.add_argument_group("evaluation settings")
    g.add_argument("--result", "-r", metavar="PATH", required=True, help="Result JSON from 'usm fit'.")
    g.add_argument("--scene", "-s", metavar="DIR", required=True, help="Scene with a ground-truth block.")
    g.add_argument("--metrics", metavar="PATH", help="Metrics CSV to append one row to.")
    g.add_argument("--scatter", metavar="PATH", help="Uncertainty-vs-error scatter CSV.")
    g.add_argument("--name", metavar="NAME", help="Object name in the metrics row (default: scene dir).")
    g.add_argument("--points", type=int, default=10000, metavar="N", help="Surface samples (default: 10000).")
    g.add_argument("--resolution", type=int, default=64, metavar="N", help="Mesh grid size (default: 64).")
    g.add_argument("--grid", type=int, default=64, metavar="N", help="IoU grid size (default: 64).")

    # ── summary ────────────────────────────────────────────────────────────────
    p = sub.add_parser("summary", parents=[common], help="Correct-detection rates over a metrics CSV.")
    p.add_argument("metrics", metavar="METRICS_CSV", help="Metrics CSV written by 'usm eval'.")

    return parser


# ── Logging setup ─────────────────────────────────────────────────────────────


def _setup_logging(level: str, log_file: Optional[str] = None) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_path, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s [%(levelname)-8s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=handlers,
        force=True,
    )


# ── Configuration merge ───────────────────────────────────────────────────────


def _merge_args(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """CLI flags override config file and environment values."""
    if args.log_level:
        cfg.log_level = args.log_level
    if args.log_file:
        cfg.log_file = args.log_file
    if args.threads is not None:
        cfg.threads = args.threads

    if args.command == "synth":
        if args.seed is not None:
            cfg.synth.seed = args.seed
        if args.views is not None:
            cfg.synth.views = args.views
        if args.noise is not None:
            cfg.synth.noise = args.noise
        if args.radius is not None:
            cfg.synth.radius = args.radius
        if args.size is not None:
            cfg.synth.width, cfg.synth.height = args.size
        if args.focal is not None:
            cfg.synth.focal = args.focal
    elif args.seed is not None:
        cfg.optim.seed = args.seed

    if args.command == "fit":
        if args.iters is not None:
            cfg.optim.iters = args.iters
        if args.lr is not None:
            cfg.optim.lr = args.lr
        if args.decoder:
            cfg.decoder = args.decoder
        if args.lambda_s is not None:
            cfg.optim.lambda_s = args.lambda_s
        if args.lambda_r is not None:
            cfg.optim.lambda_r = args.lambda_r
        if args.lambda_c is not None:
            cfg.optim.lambda_c = args.lambda_c
    return cfg


# ── Subcommands ───────────────────────────────────────────────────────────────


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    decoder = build_decoder("analytic", cfg.latent_dim)
    latent = np.zeros(decoder.latent_dim)
    latent[:3] = args.shape
    spec = SynthSpec.from_config(cfg.synth, latent, args.pose)
    manifest = generate_scene(decoder, spec, args.out, decoder_selector="analytic")
    _print_summary(
        "SCENE WRITTEN",
        {
            "Views": spec.views,
            "Image size": f"{spec.width}x{spec.height}",
            "Depth noise": f"{spec.noise:g} m",
            "Seed": spec.seed,
        },
        {"manifest": manifest},
    )
    return EXIT_OK


def cmd_fit(args: argparse.Namespace, cfg: RunConfig) -> int:
    scene = load_scene(args.scene, workers=cfg.threads)
    decoder = build_decoder(cfg.decoder, cfg.latent_dim)
    initial_pose = None
    if args.init_pose:
        text = Path(args.init_pose).read_text(encoding="utf-8")
        initial_pose = log_pose(parse_pose_text(text, args.init_pose))

    result = fit(decoder, scene.frames, cfg.optim, initial_pose)
    state = result.state

    paths: Dict[str, object] = {
        "json": save_result_json(
            args.out, state.z, state.pose, cfg.decoder, state.iteration, state.history, cfg,
            ray_bounds=(result.bounds.center, result.bounds.radius),
        )
    }
    if args.history:
        paths["history"] = save_history_csv(args.history, state.history)

    final = state.history[-1][4] if state.history else None
    pose = state.pose.mean
    _print_summary(
        "FIT COMPLETE",
        {
            "Iterations": state.iteration,
            "Final loss": _fmt(final, ".6g"),
            "Translation": np.array2string(pose.t, precision=4),
            "Rotation": np.array2string(pose.phi, precision=4),
            "Scale": np.array2string(pose.s, precision=4),
        },
        paths,
    )
    return EXIT_OK


def cmd_render(args: argparse.Namespace, cfg: RunConfig) -> int:
    stored = load_result_json(args.result)
    scene = load_scene(args.scene, workers=cfg.threads)
    if not 0 <= args.view < len(scene.frames):
        raise InvalidInputError(f"view {args.view} out of range; scene has {len(scene.frames)} frame(s)")
    frame = scene.frames[args.view]
    decoder = build_decoder(stored.decoder, stored.z.dim)
    if stored.ray_bounds is not None:
        bounds = RayBounds(*stored.ray_bounds)
    else:
        logger.debug("Result file has no ray bounds; bounding the fitted pose instead.")
        bounds = RayBounds.around(stored.pose.mean, decoder, cfg.optim.ray.bound_padding)

    out = render_depth_map(
        decoder, stored.z, stored.pose, frame.intrinsics, frame.T_wc, cfg.optim.ray,
        bounds=bounds, seed=cfg.optim.seed, view=args.view,
    )
    paths: Dict[str, object] = {"depth": write_pfm(args.depth, out.depth), "std": write_pfm(args.std, out.std)}

    if args.beta_csv:
        rows = []
        clamped = 0
        for v, u in zip(*np.nonzero(out.rendered)):
            fit_ = beta_moment_match(float(out.escape_mean[v, u]), float(out.escape_var[v, u]))
            clamped += int(fit_.clamped)
            rows.append([
                int(u), int(v), float(out.depth[v, u]), float(out.std[v, u]),
                float(out.escape_mean[v, u]), float(out.escape_var[v, u]), fit_.alpha, fit_.beta,
            ])
        if clamped:
            logger.warning("Beta moment match clamped the variance on %d pixel(s).", clamped)
        paths["beta"] = save_beta_csv(args.beta_csv, rows)

    valid = frame.mask & (frame.depth > 0) & out.rendered
    residual = float(np.mean(np.abs(out.depth[valid] - frame.depth[valid]))) if valid.any() else None
    _print_summary(
        "RENDER COMPLETE",
        {
            "View": args.view,
            "Rendered pixels": int(out.rendered.sum()),
            "Mean |residual|": _fmt(residual, ".5f"),
            "Mean depth std": _fmt(float(np.mean(out.std[valid])) if valid.any() else None, ".5f"),
        },
        paths,
    )
    return EXIT_OK


def cmd_mesh(args: argparse.Namespace, cfg: RunConfig) -> int:
    stored = load_result_json(args.result)
    decoder = build_decoder(stored.decoder, stored.z.dim)
    z = stored.z.mean
    extracted = extract_mesh(decoder, z, args.resolution, bound=MESH_BOUND * decoder.canonical_extent(z))
    mesh = extracted.mesh
    if args.world and not extracted.empty:
        mesh.vertices = transform_point(stored.pose.mean, np.asarray(mesh.vertices))
    path = save_obj(args.out, mesh)
    _print_summary(
        "MESH WRITTEN",
        {
            "Resolution": args.resolution,
            "Vertices": len(mesh.vertices),
            "Faces": len(mesh.faces),
            "Watertight": extracted.watertight,
        },
        {"obj": path},
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    stored = load_result_json(args.result)
    scene = load_scene(args.scene, workers=cfg.threads)
    gt = scene.ground_truth
    if gt is None or gt.pose is None:
        raise InvalidInputError(f"{args.scene}: scene has no ground-truth pose")

    decoder = build_decoder(stored.decoder, stored.z.dim)
    est = ShapeInstance(decoder, stored.z.mean, stored.pose.mean)
    errors = pose_error(stored.pose.mean, gt.pose)
    metrics = ObjectMetrics(args.name or Path(args.scene).name, errors, pose_correct(errors))
    seed = cfg.optim.seed

    gt_points = None
    if gt.latent is not None:
        gt_decoder = build_decoder(gt.decoder or stored.decoder, gt.latent.size)
        gt_shape = ShapeInstance(gt_decoder, gt.latent, gt.pose)
        metrics.iou = iou_3d(est, gt_shape, args.grid)
        gt_points = sample_shape_surface(gt_shape, args.points, args.resolution, seed)
    elif gt.mesh_path is not None:
        logger.warning("Ground truth is a mesh without a latent code; IoU is not computed.")
        canonical = sample_mesh_surface(load_mesh(gt.mesh_path), args.points, seed)
        gt_points = transform_point(gt.pose, canonical)
    else:
        logger.warning("Ground truth has no shape; only pose errors are reported.")

    paths: Dict[str, object] = {}
    if gt_points is not None:
        est_points = sample_shape_surface(est, args.points, args.resolution, seed)
        metrics.chamfer = chamfer(est_points, gt_points)
        corr = uncertainty_correlation(decoder, stored.z, stored.pose, gt_points)
        metrics.pearson_r = corr.r
        if args.scatter:
            paths["scatter"] = save_scatter_csv(
                args.scatter, corr.points, corr.sdf_mean, corr.sdf_std, corr.abs_error
            )
    if args.metrics:
        paths["metrics"] = append_metrics_csv(args.metrics, metrics.as_row())

    _print_summary(
        "EVALUATION",
        {
            "Object": metrics.name,
            "Translation err": f"{errors.translation:.4f} m",
            "Rotation err": f"{errors.rotation:.3f} deg",
            "Scale err": f"{errors.scale:.4f}",
            "Pose correct": "yes" if metrics.correct else "no",
            "IoU": _fmt(metrics.iou),
            "Chamfer": _fmt(metrics.chamfer, ".5f"),
            "Pearson r": _fmt(metrics.pearson_r),
        },
        paths,
    )
    return EXIT_OK


def cmd_summary(args: argparse.Namespace, cfg: RunConfig) -> int:
    rates = detection_rates(read_metrics_csv(args.metrics))
    _print_summary(
        "CORRECT DETECTION RATES",
        {
            "Objects": rates.count,
            "9-DoF pose": f"{rates.pose:.3f}",
            "IoU > 0.25": f"{rates.iou:.3f}",
            "Chamfer < 0.2 m": f"{rates.chamfer:.3f}",
        },
    )
    return EXIT_OK


_COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "render": cmd_render,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
    "summary": cmd_summary,
}


# ── Entry point ───────────────────────────────────────────────────────────────


def main(argv: Optional[List[str]] = None) -> int:
    """
    CLI entry point.

    Returns:
        Exit code – ``0`` on success, ``1`` on usage or configuration errors,
        ``2`` on invalid data, ``3`` when the optimisation aborts numerically.
    """
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE

    # ── Load and merge configuration ──────────────────────────────────────────
    try:
        cfg = load_config(args.config if Path(args.config).exists() else None)
        cfg = _merge_args(cfg, args)
        cfg.validate()
    except ConfigError as exc:
        print(f"usm: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    # ── Logging ───────────────────────────────────────────────────────────────
    _setup_logging(cfg.log_level, cfg.log_file)
    if cfg.threads:
        torch.set_num_threads(cfg.threads)

    try:
        return _COMMANDS[args.command](args, cfg)
    except NumericalAbortError as exc:
        logger.error("Optimisation aborted: %s", exc)
        return EXIT_NUMERIC
    except (UsmError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

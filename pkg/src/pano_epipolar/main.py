import argparse
import inspect
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import yaml

from pano_epipolar.core.epipolar import sample_epipolar, epipolar_plane
from pano_epipolar.core.errors import (
    ConfigError,
    FormatError,
    GenerationError,
    InputError,
    MemoryBudgetError,
    PanoEpipolarError,
    ValidationFailure,
)
from pano_epipolar.core.file_formats import (
    ManifestRecord,
    append_manifest,
    read_image,
    read_trajectory,
    write_correspondences,
    write_image,
    write_masks,
    write_plucker,
    write_trajectory,
)
from pano_epipolar.core.geometry import (
    ConventionMode,
    GridSpec,
    PixelCoord,
    anchor_trajectory,
    plucker_field,
    plucker_trajectory,
    relative_pose,
)
from pano_epipolar.core.validation import SUITES
from pano_epipolar.utils.class_loader import apply_overrides, initialize_from_config, resolve_interpolations
from pano_epipolar.utils.common_utils import format_frame, log_report_frame
from pano_epipolar.utils.logger import setup_logging

logger = logging.getLogger("pano_epipolar")

DEFAULT_CONFIG = os.path.join(os.path.dirname(__file__), "config", "config.yaml")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_INPUT = 2
EXIT_VALIDATION = 3
EXIT_IO = 4
EXIT_MEMORY = 5
EXIT_GENERATION = 6


@dataclass
class CommandConfig:
    """Parsed flags of one subcommand, checked before any computation starts."""
    subcommand: str
    config: dict
    components: dict
    out: str | None = None
    traj: str | None = None
    image: str | None = None
    grid: GridSpec | None = None
    feat_grid: GridSpec | None = None
    mode: ConventionMode = ConventionMode.DEFAULT_LATITUDE
    query_frames: list[int] | None = None
    anchor_frame: int | None = None
    seed_scene: int | None = None
    seed_traj: int | None = None
    options: dict = field(default_factory=dict)


def parse_bytes(text: str) -> int:
    units = {"K": 1024, "M": 1024 ** 2, "G": 1024 ** 3}
    text = str(text).strip().upper().removesuffix("B")
    try:
        if text and text[-1] in units:
            return int(float(text[:-1]) * units[text[-1]])
        return int(text)
    except ValueError as e:
        raise InputError(f"cannot read memory budget {text!r} (e.g. 2G, 512M, 1048576)") from e


def parse_frames(text: str | None) -> list[int] | None:
    if text is None or text.strip().lower() == "all":
        return None
    try:
        return sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError as e:
        raise InputError(f"--query-frames expects comma-separated integers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pano_epipolar",
                                     description="Panoramic Plücker fields and spherical epipolar masks")
    parser.add_argument('--config', type=str, default=DEFAULT_CONFIG)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def grid_flags(p, height=None, width=None):
        p.add_argument('--width', type=int, default=width)
        p.add_argument('--height', type=int, default=height)

    def mask_flags(p):
        p.add_argument('--feat-h', type=int, default=None)
        p.add_argument('--feat-w', type=int, default=None)
        p.add_argument('--k', type=int, default=None)
        p.add_argument('--tau', type=float, default=None)
        p.add_argument('--wrap-u', action=argparse.BooleanOptionalAction, default=None)
        p.add_argument('--workers', type=int, default=None)

    p = sub.add_parser("plucker", help="write the Plücker field of every frame (PLKF)")
    p.add_argument('--traj', required=True)
    grid_flags(p, 256, 512)
    p.add_argument('--mode', choices=[m.value for m in ConventionMode], default=ConventionMode.DEFAULT_LATITUDE.value)
    p.add_argument('--anchor-frame', type=int, default=None)
    p.add_argument('--out', required=True)

    p = sub.add_parser("mask", help="write epipolar attention masks (SEPM)")
    p.add_argument('--traj', required=True)
    mask_flags(p)
    p.add_argument('--query-frames', type=str, default=None)
    p.add_argument('--mem-budget', type=str, default=None)
    p.add_argument('--out', required=True)

    p = sub.add_parser("epicurve", help="draw the epipolar curve of one pixel onto a panorama")
    p.add_argument('--traj', required=True)
    p.add_argument('--frame-i', type=int, required=True)
    p.add_argument('--frame-j', type=int, required=True)
    p.add_argument('--u', type=float, required=True)
    p.add_argument('--v', type=float, required=True)
    p.add_argument('--image', required=True)
    p.add_argument('--k', type=int, default=None)
    grid_flags(p)
    p.add_argument('--out', required=True)

    p = sub.add_parser("render", help="render a procedural clip with trajectory, manifest and correspondences")
    p.add_argument('--seed-scene', type=int, default=0)
    p.add_argument('--seed-traj', type=int, default=0)
    p.add_argument('--frames', type=int, default=None)
    grid_flags(p, 256, 512)
    render_mode = p.add_mutually_exclusive_group()
    render_mode.add_argument('--via-cubemap', dest="via_cubemap", action="store_true", default=None)
    render_mode.add_argument('--direct', dest="via_cubemap", action="store_false")
    p.add_argument('--face-size', type=int, default=None)
    p.add_argument('--correspondences', type=int, default=None)
    p.add_argument('--out', required=True)

    p = sub.add_parser("validate", help="run a validation suite; exit 0 iff every check passes")
    p.add_argument('suite', choices=sorted(SUITES))
    mask_flags(p)
    grid_flags(p)
    p.add_argument('--seed-scene', type=int, default=None)
    p.add_argument('--seed-traj', type=int, default=None)
    p.add_argument('--cases', type=int, default=None)
    p.add_argument('--query-frames', type=str, default=None)
    p.add_argument('--out', type=str, default=None)
    return parser


def _load_config(path: str) -> dict:
    try:
        with open(path, 'r') as f:
            return yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def make_command_config(args: argparse.Namespace) -> CommandConfig:
    config = _load_config(args.config)
    overrides = {
        "mask_builder.args.k": getattr(args, "k", None),
        "mask_builder.args.tau": getattr(args, "tau", None),
        "mask_builder.args.wrap_u": getattr(args, "wrap_u", None),
        "mask_builder.args.workers": getattr(args, "workers", None),
        "oracle.args.workers": getattr(args, "workers", None),
        "scene_forge.args.sample": getattr(args, "frames", None),
        "scene_forge.args.face_size": getattr(args, "face_size", None),
        "scene_forge.args.correspondences": getattr(args, "correspondences", None),
    }
    if getattr(args, "mem_budget", None) is not None:
        overrides["mask_builder.args.mem_budget"] = parse_bytes(args.mem_budget)
    config = apply_overrides(config, overrides)

    cmd = CommandConfig(args.subcommand, config, initialize_from_config(config, package_root='pano_epipolar'),
                        out=getattr(args, "out", None))
    if getattr(args, "traj", None):
        cmd.traj = _require_file(args.traj, "trajectory file")
    if getattr(args, "image", None):
        cmd.image = _require_file(args.image, "panorama image")
    if getattr(args, "width", None) and getattr(args, "height", None):
        cmd.grid = GridSpec(args.width, args.height)
    if hasattr(args, "feat_h"):
        cmd.feat_grid = GridSpec(args.feat_w or 64, args.feat_h or 32)
    if hasattr(args, "mode"):
        cmd.mode = ConventionMode(args.mode)
    cmd.query_frames = parse_frames(getattr(args, "query_frames", None))
    cmd.anchor_frame = getattr(args, "anchor_frame", None)
    cmd.seed_scene = getattr(args, "seed_scene", None)
    cmd.seed_traj = getattr(args, "seed_traj", None)
    cmd.options = {k: v for k, v in vars(args).items()
                   if k in ("frame_i", "frame_j", "u", "v", "via_cubemap", "suite", "cases", "feat_h", "feat_w")}
    if cmd.out and cmd.subcommand != "render":
        os.makedirs(os.path.dirname(os.path.abspath(cmd.out)), exist_ok=True)
    return cmd


def _check_frame(index: int, count: int, flag: str) -> int:
    if not 0 <= index < count:
        raise InputError(f"{flag} {index} is outside the trajectory (0..{count - 1})")
    return index


def cmd_plucker(cmd: CommandConfig) -> int:
    poses = read_trajectory(cmd.traj)
    if cmd.anchor_frame is not None:
        poses = anchor_trajectory(poses, _check_frame(cmd.anchor_frame, len(poses), "--anchor-frame"))
    fields = plucker_trajectory(poses, cmd.grid, cmd.mode)
    rows = []
    for i, pose in enumerate(poses):
        dot, norm = plucker_field(pose, cmd.grid, i, cmd.mode).invariant_errors()
        rows.append({"frame": i, "max_m_dot_d": dot, "max_norm_err": norm})
    size = write_plucker(cmd.out, fields)
    logger.info(f"Wrote {len(poses)} Plücker fields at {cmd.grid.height}x{cmd.grid.width} to {cmd.out} ({size:,} bytes)")
    print(format_frame(pd.DataFrame(rows)))
    return EXIT_OK


def cmd_mask(cmd: CommandConfig) -> int:
    poses = read_trajectory(cmd.traj)
    frames = cmd.query_frames if cmd.query_frames is not None else list(range(len(poses)))
    for i in frames:
        _check_frame(i, len(poses), "query frame")
    builder = cmd.components["mask_builder"]
    masks = builder.build(poses, cmd.feat_grid, frames)
    size = write_masks(cmd.out, masks)
    logger.info(f"Wrote {len(masks)} masks (N={len(poses)}, {cmd.feat_grid.height}x{cmd.feat_grid.width}, "
                f"K={builder.k}) to {cmd.out} ({size:,} bytes)")
    densities = pd.DataFrame([{"query_frame": m.query_frame, "bits": m.count(), "density": m.density()}
                              for m in masks])
    print(format_frame(densities))
    if cmd.config.get("plotter"):
        cmd.components["plotter"].plot_mask_density(densities)
    return EXIT_OK


def cmd_epicurve(cmd: CommandConfig) -> int:
    poses = read_trajectory(cmd.traj)
    i = _check_frame(cmd.options["frame_i"], len(poses), "--frame-i")
    j = _check_frame(cmd.options["frame_j"], len(poses), "--frame-j")
    image = read_image(cmd.image)
    grid = GridSpec(image.shape[1], image.shape[0])
    if cmd.grid is not None and cmd.grid != grid:
        raise InputError(f"image is {grid.height}x{grid.width}, flags say {cmd.grid.height}x{cmd.grid.width}")
    u, v = cmd.options["u"], cmd.options["v"]
    if not (0 <= u < grid.width and 0 <= v < grid.height):
        raise InputError(f"pixel ({u}, {v}) is outside the {grid.height}x{grid.width} panorama")
    builder = cmd.components["mask_builder"]
    rel = relative_pose(poses[i], poses[j])
    query = PixelCoord(u, v)
    samples = sample_epipolar(epipolar_plane(rel, query, grid, i), builder.k, grid, rel, builder.baseline_eps)
    overlay = cmd.components["plotter"].draw_epicurve(image, samples.points, query)
    write_image(cmd.out, overlay)
    logger.info(f"Drew {samples.k} curve samples of pixel ({u}, {v}) from frame {i} into frame {j}: {cmd.out}")
    return EXIT_OK


def cmd_render(cmd: CommandConfig) -> int:
    forge = cmd.components["scene_forge"]
    via_cubemap = bool(cmd.options.get("via_cubemap"))
    clip = forge.render_clip(cmd.seed_scene, cmd.seed_traj, cmd.grid, via_cubemap)
    os.makedirs(cmd.out, exist_ok=True)
    names = []
    for index, frame in zip(clip.trajectory.sampled_indices, clip.frames):
        name = f"frame_{index:03d}.ppm"
        write_image(os.path.join(cmd.out, name), frame)
        names.append(name)
    write_trajectory(os.path.join(cmd.out, "trajectory.jsonl"), clip.trajectory.poses)
    write_trajectory(os.path.join(cmd.out, "sampled_trajectory.jsonl"), clip.trajectory.sampled_poses())
    write_correspondences(os.path.join(cmd.out, "correspondences.jsonl"), clip.correspondences)
    manifest = os.path.join(cmd.out, "manifest.jsonl")
    if os.path.exists(manifest):
        os.remove(manifest)
    append_manifest(manifest, ManifestRecord(
        scene_seed=cmd.seed_scene,
        trajectory_seed=cmd.seed_traj,
        sampled_indices=list(clip.trajectory.sampled_indices),
        conditional_frame_index=clip.trajectory.conditional_frame_index,
        evaluation_frame_index=clip.trajectory.evaluation_frame_index,
        frames=names,
        trajectory="trajectory.jsonl",
        sampled_trajectory="sampled_trajectory.jsonl",
        correspondences="correspondences.jsonl",
    ))
    logger.info(f"Rendered {len(names)} frames to {cmd.out}")
    return EXIT_OK


def _suite_kwargs(suite, cmd: CommandConfig) -> dict:
    params = resolve_interpolations(dict(cmd.config.get("validation", {}).get(cmd.options["suite"]) or {}), cmd.config)
    available = {
        "forge": cmd.components.get("scene_forge"),
        "builder": cmd.components.get("mask_builder"),
        "oracle": cmd.components.get("oracle"),
        "scene_seed": cmd.seed_scene,
        "traj_seed": cmd.seed_traj,
        "cases": cmd.options.get("cases"),
        "query_frames": cmd.query_frames,
    }
    if cmd.grid is not None:
        available.update(height=cmd.grid.height, width=cmd.grid.width)
    for flag in ("feat_h", "feat_w"):
        available[flag] = cmd.options.get(flag)
    accepted = inspect.signature(suite).parameters
    for name, value in available.items():
        if name in accepted and value is not None:
            params[name] = value
    return params


def cmd_validate(cmd: CommandConfig) -> int:
    name = cmd.options["suite"]
    suite = SUITES[name]
    result = suite(**_suite_kwargs(suite, cmd))
    log_report_frame(result.table, f"{name} report")
    print(format_frame(result.table, rows=50))
    print(format_frame(result.summary_frame()))
    if "sweep" in result.extra:
        print(format_frame(result.extra["sweep"]))
        if cmd.config.get("plotter"):
            cmd.components["plotter"].plot_k_sweep(result.extra["sweep"], result.summary.get("k_ref"))
    if cmd.out:
        with open(cmd.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps({"record": "summary", "suite": name, "passed": result.passed,
                                **{k: _plain(v) for k, v in result.summary.items()}}) + "\n")
            for row in result.table.to_dict(orient="records"):
                f.write(json.dumps({"record": "row", **{k: _plain(v) for k, v in row.items()}}) + "\n")
    if not result.passed:
        raise ValidationFailure(f"suite {name} failed")
    return EXIT_OK


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    return value


COMMANDS = {
    "plucker": cmd_plucker,
    "mask": cmd_mask,
    "epicurve": cmd_epicurve,
    "render": cmd_render,
    "validate": cmd_validate,
}


def exit_code(error: BaseException) -> int:
    if isinstance(error, ValidationFailure):
        return EXIT_VALIDATION
    if isinstance(error, MemoryBudgetError):
        return EXIT_MEMORY
    if isinstance(error, GenerationError):
        return EXIT_GENERATION
    if isinstance(error, (FormatError, OSError)):
        return EXIT_IO
    if isinstance(error, (InputError, ValueError, IndexError)):
        return EXIT_INPUT
    return EXIT_OTHER


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        logcfg = _load_config(args.config).get('logging', {})
    except (OSError, ConfigError) as e:
        print(f"error: cannot read config {args.config}: {e}", file=sys.stderr)
        return exit_code(e)
    setup_logging(level=logcfg.get('level', 'INFO'),
                  logfile=logcfg.get('logfile'),
                  max_bytes=logcfg.get('max_bytes', 1048576),
                  backup_count=logcfg.get('backup_count', 5))
    logger.info(f"Starting pano_epipolar {args.subcommand}")

    try:
        cmd = make_command_config(args)
        return COMMANDS[args.subcommand](cmd)
    except ValidationFailure as e:
        logger.error(str(e))
        return EXIT_VALIDATION
    except (PanoEpipolarError, OSError, ValueError, IndexError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return exit_code(e)


if __name__ == "__main__":
    sys.exit(main())

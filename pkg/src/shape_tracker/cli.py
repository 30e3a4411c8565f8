"""
Command-line driver: simulate, track, register, ablate, global-ba, texture-export.

Every command accepts --config, --seed, --deterministic, --out and --toggle. On failure
the module-tagged error record is written to <out>/error.json and the exit code is 1.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .configs import settings
from .configs.models import RunConfig
from .data_loader import write_pose_file
from .errors import ConfigError, ShapeTrackerError
from .geometry import Intrinsics
from .orchestrator import RunOrchestrator, register_from_csv, simulate
from .prior_shape import save_ply

logger = logging.getLogger("shape_tracker")

_ON = {"on", "true", "1", "yes"}
_OFF = {"off", "false", "0", "no"}


def parse_toggle(text: str) -> Tuple[str, Optional[bool]]:
    """`NAME` (flip the configured value), `NAME=on` or `NAME=off`."""
    name, sep, value = text.partition("=")
    name = name.strip().replace("-", "_")
    if not sep:
        return name, None
    value = value.strip().lower()
    if value in _ON:
        return name, True
    if value in _OFF:
        return name, False
    raise ConfigError(f"toggle value must be on/off, got '{value}'")


def _parse_intrinsics(text: str) -> Intrinsics:
    try:
        fx, fy, cx, cy, w, h = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError("--intrinsics expects fx,fy,cx,cy,width,height")
    return Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(w), height=int(h))


def load_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        config = RunConfig.from_toml(args.config)
    elif getattr(args, "preset", None):
        config = RunConfig.from_dict({"scenario": {"preset": args.preset}})
    else:
        raise ConfigError("--config or --preset is required")
    data = {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.deterministic:
        data["deterministic"] = True
    if args.out:
        data["output_dir"] = Path(args.out)
    toggles = config.toggles
    for text in args.toggle or []:
        name, value = parse_toggle(text)
        if args.command == "ablate" and value is None:
            continue
        toggles = toggles.flipped(name, value)
    data["toggles"] = toggles
    return config.model_copy(update=data)


# =====================
# Commands
# =====================

def cmd_simulate(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args)
    paths = simulate(config)
    return {name: str(path) for name, path in paths.items()}


def cmd_track(args: argparse.Namespace) -> Dict[str, Any]:
    outcome = RunOrchestrator(load_config(args)).execute()
    return {"report": json.loads(outcome.report.deterministic_json()), "fps": outcome.report.timing.fps}


def cmd_register(args: argparse.Namespace) -> Dict[str, Any]:
    config = None
    if args.intrinsics:
        k = _parse_intrinsics(args.intrinsics)
        if args.config:
            config = load_config(args)
    else:
        config = load_config(args)
        if config.images is None:
            raise ConfigError("register needs --intrinsics or an [images] config section")
        k = config.images.intrinsics
    result = register_from_csv(args.correspondences, k, config)
    record = {
        "pose": result.pose.matrix34().tolist(),
        "rms_px": result.rms_px,
        "converged": result.converged,
        "winning_seed": result.winning_seed,
        "per_start_residuals": result.per_start_residuals,
    }
    out = Path(args.out or (config.output_dir if config else "runs/out"))
    out.mkdir(parents=True, exist_ok=True)
    write_pose_file(out / "t_init.txt", result.pose)
    (out / "registration.json").write_text(json.dumps(record, indent=2), encoding="utf-8")
    return record


def cmd_ablate(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args)
    names = [parse_toggle(t)[0] for t in args.toggle or []]
    if len(names) != 1:
        raise ConfigError("ablate needs exactly one --toggle NAME")
    seeds = args.seeds if args.seeds else [config.seed]
    rows = RunOrchestrator(config).ablate(names[0], seeds)
    return {
        "toggle": names[0],
        "pairs": [
            {
                "seed": r["seed"],
                "base": json.loads(r["base"].deterministic_json()),
                "flipped": json.loads(r["flipped"].deterministic_json()),
            }
            for r in rows
        ],
    }


def cmd_global_ba(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args).model_copy(update={"global_ba_at_end": True})
    orchestrator = RunOrchestrator(config)
    outcome = orchestrator.execute()
    if outcome.global_ba is None:
        raise ConfigError("global BA needs a map with at least two keyframes")
    problem_path = orchestrator.export_ba_problem(outcome.tracker, Path(config.output_dir) / "ba_problem.txt")
    record = {
        "initial_cost": outcome.global_ba.initial_cost,
        "final_cost": outcome.global_ba.final_cost,
        "iterations": outcome.global_ba.iterations,
        "problem": str(problem_path),
    }
    (Path(config.output_dir) / "global_ba.json").write_text(json.dumps(record, indent=2), encoding="utf-8")
    return record


def cmd_texture_export(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args)
    outcome = RunOrchestrator(config).execute()
    target = Path(args.mesh_out) if args.mesh_out else Path(config.output_dir) / "textured.ply"
    save_ply(outcome.tracker.mesh, target)
    return {"mesh": str(target), "faces": int(len(outcome.tracker.mesh.faces))}


COMMANDS = {
    "simulate": cmd_simulate,
    "track": cmd_track,
    "register": cmd_register,
    "ablate": cmd_ablate,
    "global-ba": cmd_global_ba,
    "texture-export": cmd_texture_export,
}


# =====================
# Parser
# =====================

def _seed_list(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("--seeds expects comma-separated integers")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run config")
    common.add_argument("--preset", help="builtin scenario preset instead of --config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true", help="sequential mapping, byte-stable outputs")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--toggle", action="append", metavar="NAME[=on|off]",
                        help="prior_init, pseudo_mask or shape_prior_ba; a bare NAME flips it")

    parser = argparse.ArgumentParser(prog="shape-tracker", description="Prior-shape monocular organ tracker")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic scenario to disk")
    sub.add_parser("track", parents=[common], help="run tracking and write trajectory, mesh and report")
    reg = sub.add_parser("register", parents=[common], help="initial registration from correspondences")
    reg.add_argument("--correspondences", type=Path, required=True, help="CSV with x,y,z,u,v")
    reg.add_argument("--intrinsics", help="fx,fy,cx,cy,width,height")
    abl = sub.add_parser("ablate", parents=[common], help="paired runs with one toggle flipped")
    abl.add_argument("--seeds", type=_seed_list, default=None, help="comma-separated seeds")
    sub.add_parser("global-ba", parents=[common], help="track, then run global bundle adjustment")
    tex = sub.add_parser("texture-export", parents=[common], help="track, then export the textured mesh")
    tex.add_argument("--mesh-out", type=Path, default=None)
    return parser


def _error_record(exc: BaseException) -> Dict[str, Any]:
    if isinstance(exc, ShapeTrackerError):
        return exc.to_record()
    return {"success": False, "module": "unknown", "error_type": type(exc).__name__, "error": str(exc)}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL, logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except Exception as e:
        record = _error_record(e)
        out = Path(args.out or "runs/out")
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(json.dumps(record, indent=2), encoding="utf-8")
        logger.error(f"[CLI] {args.command} failed: {record['error_type']}: {record['error']}")
        logger.debug("traceback", exc_info=True)
        return 1
    print(json.dumps({"success": True, **result}, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

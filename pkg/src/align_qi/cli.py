"""Command-line entry point: ``align-qi {synth,init-queries,eval,plot}``.

Exit codes: 0 success, 1 usage error, 2 input/schema error, 3 internal
invariant violation. Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .dqb import DEFAULT_SEED, BalanceConfig, load_config, run_pipeline
from .errors import AlignError, MismatchedSceneIds, SchemaError
from .harness import SceneSpec, evaluate_scene, report, scene_seeds, synth_scene
from .plotting import plot_bev, plot_report
from .scene_io import (atomic_write_text, dumps_json, load_anchors, load_scene,
                       read_json, save_anchors, save_scene)

log = logging.getLogger("align_qi")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3
ANCHOR_SUFFIX = ".anchors.jsonl"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _error_record(exc, path=None) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc)}
    if path is not None:
        rec["file"] = str(path)
    return rec


def _emit_errors(records) -> None:
    sys.stderr.write(json.dumps({"errors": records}, sort_keys=True) + "\n")


def discover_scenes(root) -> list[Path]:
    """A scene directory itself, or its immediate sub-directories holding a .bin file."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: not a directory")
    if any(root.glob("*.bin")):
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("*.bin")))


def resolve_config(path, seed) -> BalanceConfig:
    cfg = load_config(path) if path else BalanceConfig(seed=DEFAULT_SEED)
    return cfg.with_seed(seed)


# --------------------------------------------------------------------------
# init-queries
# --------------------------------------------------------------------------

def _init_one(args):
    scene_dir, config, out_dir = args
    try:
        scene = load_scene(scene_dir)
        result = run_pipeline(scene, config)
    except (AlignError, OSError) as exc:
        return {"scene_dir": str(scene_dir), **_error_record(exc, getattr(exc, "filename", None)
                                                             or scene_dir)}
    save_anchors(result.anchor_set, Path(out_dir) / f"{scene.scene_id}{ANCHOR_SUFFIX}")
    diag = {"scene_id": scene.scene_id, "config_hash": result.anchor_set.config_hash,
            **result.diagnostics}
    atomic_write_text(Path(out_dir) / f"{scene.scene_id}.diag.json", dumps_json(diag))
    return None


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_init_queries(args) -> int:
    config = resolve_config(args.config, args.seed)
    scenes = discover_scenes(args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = [e for e in _map(_init_one, [(s, config, out) for s in scenes], args.jobs) if e]
    manifest = {
        "tool_version": __version__,
        "config_path": str(args.config) if args.config else None,
        "config_hash": config.digest(),
        "config": config.to_dict(),
        "scenes": [str(s) for s in scenes],
        "output_dir": str(out),
    }
    atomic_write_text(out / "manifest.json", dumps_json(manifest))
    if errors:
        _emit_errors(errors)
        return EXIT_INPUT
    return EXIT_OK


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def _synth_one(args):
    spec, seq, scene_id, out_dir = args
    syn = synth_scene(spec, np.random.default_rng(seq), scene_id)
    save_scene(syn.scene, Path(out_dir) / scene_id)
    return scene_id


def cmd_synth(args) -> int:
    spec = SceneSpec.from_dict(read_json(args.spec)) if args.spec else SceneSpec()
    seed = spec.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, seq, f"scene_{k:04d}", out) for k, seq in enumerate(scene_seeds(seed, args.count))]
    _map(_synth_one, jobs, args.jobs)
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def load_anchor_dir(anchor_dir) -> dict:
    sets = {}
    for path in sorted(Path(anchor_dir).glob(f"*{ANCHOR_SUFFIX}")):
        aset = load_anchors(path)
        if aset.scene_id in sets:
            raise SchemaError(f"{path}: duplicate anchors for scene {aset.scene_id}")
        sets[aset.scene_id] = aset
    return sets


def evaluate_dirs(scene_root, anchor_dir, radius=2.0, include_background=False,
                  min_lidar_points=1):
    scenes = [load_scene(d) for d in discover_scenes(scene_root)]
    anchors = load_anchor_dir(anchor_dir)
    ids = {s.scene_id for s in scenes}
    unknown = sorted(set(anchors) - ids)
    missing = sorted(ids - set(anchors))
    if unknown or missing:
        raise MismatchedSceneIds(f"anchors for unknown scenes {unknown}; scenes without anchors {missing}")
    evals = []
    for s in scenes:
        if s.ground_truth is None:
            raise SchemaError(f"scene {s.scene_id} has no gt.json")
        evals.append(evaluate_scene(anchors[s.scene_id], s.ground_truth, radius,
                                    include_background=include_background,
                                    points=s.points, min_lidar_points=min_lidar_points))
    return report(evals)


def cmd_eval(args) -> int:
    rep = evaluate_dirs(args.scenes, args.anchors, args.radius, args.include_background,
                        args.min_lidar_points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "report.json", rep.to_json())
    atomic_write_text(out / "report.csv", rep.to_csv())
    plot_report(rep, out / "report.svg")
    return EXIT_OK


# --------------------------------------------------------------------------
# plot
# --------------------------------------------------------------------------

def cmd_plot(args) -> int:
    scene = load_scene(args.scene)
    anchors = load_anchors(args.anchors) if args.anchors else None
    config = resolve_config(args.config, None)
    plot_bev(scene, anchors, args.out, config.roi)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="align-qi", description="Object-aware query anchor initialisation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("init-queries", help="compute anchor sets for scene directories")
    q.add_argument("--scenes", required=True, help="scene directory or directory of scenes")
    q.add_argument("--config", help="JSON pipeline config")
    q.add_argument("--seed", type=int, help="overrides the config seed")
    q.add_argument("--out", required=True)
    q.add_argument("--jobs", type=int, default=1)
    q.set_defaults(func=cmd_init_queries)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("--spec", help="JSON scene spec")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, help="master seed; overrides the spec seed")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="visibility-stratified anchor report")
    e.add_argument("--scenes", required=True)
    e.add_argument("--anchors", required=True, help="directory of *.anchors.jsonl files")
    e.add_argument("--out", required=True)
    e.add_argument("--radius", type=float, default=2.0)
    e.add_argument("--include-background", action="store_true")
    e.add_argument("--min-lidar-points", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("plot", help="BEV SVG of a scene and its anchors")
    b.add_argument("--scene", required=True)
    b.add_argument("--anchors")
    b.add_argument("--config", help="config whose ROI is drawn")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ALIGN_QI_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "jobs", 1) < 1 or getattr(args, "count", 0) < 0:
            parser.error("--jobs must be >= 1 and --count >= 0")
    except SystemExit as exc:  # --help / --version / usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (AlignError, OSError, ValueError) as exc:
        _emit_errors([_error_record(exc, getattr(exc, "filename", None))])
        return EXIT_INPUT
    except AssertionError as exc:
        _emit_errors([_error_record(exc)])
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

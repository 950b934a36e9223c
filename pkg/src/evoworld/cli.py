"""Command-line surface: scene generation, benchmark assembly, headless
runs, evaluation and the live session server.

Settings resolve in order: built-in defaults, then a JSON config file
(--config, keys "engine", "port", "scenes"), then EVOWORLD_* environment
variables (EVOWORLD_PORT, EVOWORLD_SCENES, and EVOWORLD_ENGINE_<FIELD>
for any engine config field), then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .bench import BenchmarkConfig, assemble_benchmark, load_case, write_case
from .metrics import evaluate_sequence, report_to_json, write_report
from .scene import generate_scene, scene_to_manifest
from .service import config_for_case, export_frames, load_exported_frames, run_case
from .types import EngineConfig


def _load_settings(config_path):
    settings = {"engine": {}, "port": 8765, "scenes": None}
    if config_path:
        file_cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        settings["engine"].update(file_cfg.get("engine", {}))
        for key in ("port", "scenes"):
            if key in file_cfg:
                settings[key] = file_cfg[key]
    if os.environ.get("EVOWORLD_PORT"):
        settings["port"] = int(os.environ["EVOWORLD_PORT"])
    if os.environ.get("EVOWORLD_SCENES"):
        settings["scenes"] = os.environ["EVOWORLD_SCENES"]
    defaults = EngineConfig()
    for field_name in defaults.to_dict():
        env_key = f"EVOWORLD_ENGINE_{field_name.upper()}"
        if env_key in os.environ:
            raw = os.environ[env_key]
            settings["engine"][field_name] = json.loads(raw)
    return settings


def cmd_gen_scene(args) -> int:
    spec = {"n_entities": args.entities}
    if args.width:
        spec["width"] = args.width
    if args.height:
        spec["height"] = args.height
    scene = generate_scene(args.seed, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "scene.json"
    path.write_text(
        json.dumps(scene_to_manifest(scene), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    print(f"wrote {path} ({len(scene.background)} background points, "
          f"{len(scene.entities)} entities)")
    return 0


def _find_scene_files(scenes_dir: Path):
    direct = scenes_dir / "scene.json"
    if direct.exists():
        return [direct]
    return sorted(scenes_dir.glob("*/scene.json")) + sorted(scenes_dir.glob("*.scene.json"))


def cmd_gen_bench(args) -> int:
    from .scene import scene_from_manifest

    scenes_dir = Path(args.scenes)
    files = _find_scene_files(scenes_dir)
    if not files:
        print(f"no scene.json files under {scenes_dir}", file=sys.stderr)
        return 2
    scenes = [scene_from_manifest(json.loads(p.read_text(encoding="utf-8"))) for p in files]
    cfg = BenchmarkConfig(
        rounds=args.rounds,
        frames_per_round=args.frames_per_round,
        r_shift=args.r_shift,
        seed=args.seed,
    )
    cases = assemble_benchmark(scenes, cfg)
    out = Path(args.out)
    for case in cases:
        write_case(case, out)
    print(f"wrote {len(cases)} cases to {out}")
    return 0


def cmd_run(args) -> int:
    case = load_case(args.case)
    settings = _load_settings(args.config)
    base = EngineConfig.from_dict({**EngineConfig().to_dict(), **settings["engine"]})
    frames, poses, _state = run_case(case, config_for_case(case, base), freeze=args.freeze)
    export_frames(frames, poses, args.out)
    print(f"ran {case.case_id}: {len(frames)} frames -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cases_dir = Path(args.cases)
    generated_dir = Path(args.generated)
    settings = _load_settings(args.config)
    base = EngineConfig.from_dict({**EngineConfig().to_dict(), **settings["engine"]})
    case_dirs = sorted(p for p in cases_dir.iterdir() if (p / "trajectory.json").exists())
    if not case_dirs:
        print(f"no cases under {cases_dir}", file=sys.stderr)
        return 2
    reports = {}
    for cd in case_dirs:
        case = load_case(cd)
        gen = generated_dir / case.case_id
        if not gen.exists():
            print(f"skipping {case.case_id}: no generated frames", file=sys.stderr)
            continue
        frames, poses = load_exported_frames(gen)
        cfg = config_for_case(case, base)
        reports[case.case_id] = evaluate_sequence(case, frames, poses, cfg)
    combined = {"version": 1, "cases": reports}
    write_report(combined, args.out)
    print(f"wrote {args.out} ({len(reports)} cases)")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    settings = _load_settings(args.config)
    port = args.port or settings["port"]
    scenes = args.scenes or settings["scenes"]
    app = create_app(Path(scenes) if scenes else None)
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evoworld")
    p.add_argument("--config", default=None, help="JSON settings file")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic scene")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--entities", type=int, default=1)
    g.add_argument("--out", required=True)
    g.add_argument("--width", type=int, default=None)
    g.add_argument("--height", type=int, default=None)
    g.set_defaults(func=cmd_gen_scene)

    b = sub.add_parser("gen-bench", help="assemble benchmark cases from scenes")
    b.add_argument("--scenes", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--rounds", type=int, default=4)
    b.add_argument("--frames-per-round", type=int, default=65)
    b.add_argument("--r-shift", type=float, default=0.18)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_gen_bench)

    r = sub.add_parser("run", help="execute one case headlessly")
    r.add_argument("--case", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--freeze", action="store_true", help="frozen-memory ablation mode")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score generated sequences against cases")
    e.add_argument("--cases", required=True)
    e.add_argument("--generated", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", help="run the WebSocket session service")
    s.add_argument("--port", type=int, default=None)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--scenes", default=None)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())

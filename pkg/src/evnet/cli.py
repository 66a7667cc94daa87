"""Command-line front end.

Every subcommand computes its results in memory, writes them into a staging
directory inside ``--out-dir`` and only then moves the files into place, so
a failing command leaves no partial reports behind. File names are fixed;
see the README for the list.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .accounting import (
    json_float,
    overhead_account,
    read_detail_json,
    totals_dict,
    write_agreement,
    write_detail_json,
    write_trace_csv,
)
from .convert import check_placement, consistency_check, convert_to_event, initialize
from .demo import demo_config_path
from .engine import gate_residuals, memory_identity_error, run_event
from .errors import ConfigError, EvnetError, ReportError
from .experiments import (
    SWEEP_COLUMNS,
    cmd_sweep,
    layer_report,
    run_pair,
    sweep_points,
    write_layer_report,
    write_rows_csv,
)
from .graph import load_graph
from .policies import KINDS, PolicyConfig, load_gammas
from .scenes import PRESETS, SceneSpec, preset, scene_generate
from .tensor import read_video, write_video


@contextmanager
def _staged(out_dir: str | Path):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        yield tmp
        for f in sorted(tmp.iterdir()):
            os.replace(f, out / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _dump(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- shared option groups ------------------------------------------------------

def _add_graph(p):
    p.add_argument("--config", help="graph document (default: the shipped demo CNN)")


def _add_video(p):
    g = _add_scene(p)
    g.add_argument("--video", help="EVTV video file; overrides the scene options")


def _add_scene(p):
    g = p.add_argument_group("input video")
    g.add_argument("--scene", default="moving_sprite", choices=sorted(PRESETS), help="scene preset")
    g.add_argument("--scene-file", help="JSON scene description (SceneSpec fields)")
    g.add_argument("--size", type=int, default=32, help="preset resolution")
    g.add_argument("--frames", type=int, default=None, help="frame count (default 40 for scenes)")
    g.add_argument("--seed", type=int, default=0)
    return g


def _add_policy(p, h_default=0.05):
    g = p.add_argument_group("transmission policy")
    g.add_argument("--policy", default="threshold", choices=KINDS)
    g.add_argument("--h", type=float, default=h_default, help="base threshold")
    g.add_argument("--chunk", type=int, nargs=2, metavar=("ROWS", "COLS"))
    g.add_argument("--h-chunk", type=float, help="chunk-mean threshold (default h/sqrt(side))")
    g.add_argument("--gamma-file", help="JSON map of gate source layer to per-channel gammas")
    g.add_argument("--policy-file", help="JSON policy document; overrides the flags above")


CONSISTENCY_COLUMNS = ("frame", "consistency_violations", "max_violation",
                       "residual_violations", "memory_identity_error")


def _graph(args):
    return load_graph(args.config or demo_config_path())


def _scene_spec(args) -> SceneSpec:
    if args.scene_file:
        doc = json.loads(Path(args.scene_file).read_text())
        if args.frames is not None:
            doc["frames"] = args.frames
        return SceneSpec.from_dict(doc)
    return preset(args.scene, frames=args.frames or 40, size=args.size)


def _video(args) -> list[np.ndarray]:
    if args.video:
        video = read_video(args.video)
        if args.frames is not None:
            if args.frames > len(video):
                raise ConfigError(f"--frames {args.frames} exceeds the {len(video)} frames in {args.video}")
            video = video[:args.frames]
        return video
    return scene_generate(_scene_spec(args), seed=args.seed)


def _video_doc(args) -> dict:
    if args.video:
        return {"video": args.video, "frames": args.frames}
    return {"scene": _scene_spec(args).to_dict(), "seed": args.seed}


def _policy(args) -> PolicyConfig:
    if args.policy_file:
        path = Path(args.policy_file)
        return PolicyConfig.from_dict(json.loads(path.read_text()), base_dir=path.parent)
    gammas = load_gammas(args.gamma_file) if args.gamma_file else None
    chunk = tuple(args.chunk) if args.chunk else None
    if args.policy == "chunked_spatial" and chunk is None:
        raise ConfigError("--policy chunked_spatial needs --chunk ROWS COLS")
    return PolicyConfig(args.policy, args.h, chunk, args.h_chunk, gammas)


# -- subcommands ---------------------------------------------------------------

def run(args) -> int:
    g, video, cfg = _graph(args), _video(args), _policy(args)
    pair = run_pair(g, video, cfg, mode=args.mode, ablate_memory=args.ablate_memory)
    summary = {"mode": args.mode, "policy": cfg.to_dict(), "ablate_memory": args.ablate_memory,
               "frames": len(video), "input": _video_doc(args)}
    if pair.conventional is not None:
        summary["conventional_macs"] = sum(t.macs for t in pair.conventional.traces)
    if pair.event is not None:
        summary["event_macs"] = sum(t.macs for t in pair.event.traces)
    if pair.report is not None:
        totals = overhead_account(pair.event.traces, pair.conventional.traces)
        summary["agreement"] = {k: json_float(v) for k, v in pair.report.summary().items()}
        summary["overhead"] = {k: json_float(v) for k, v in totals_dict(totals).items()}
    with _staged(args.out_dir) as tmp:
        if pair.conventional is not None:
            write_trace_csv(pair.conventional.traces, tmp / "trace_conventional.csv")
            write_detail_json(pair.conventional.traces, tmp / "detail_conventional.json")
        if pair.event is not None:
            write_trace_csv(pair.event.traces, tmp / "trace_event.csv")
            write_detail_json(pair.event.traces, tmp / "detail_event.json")
        if pair.report is not None:
            write_agreement(pair.report, tmp / "agreement.csv", tmp / "agreement.json")
        _dump(summary, tmp / "summary.json")
    if pair.report is not None:
        s = pair.report.summary()
        print(f"max L-inf {s['max_linf']:.3g}  final L-inf {s['final_linf']:.3g}  "
              f"savings {s['savings_ratio']:.3g}x  (steady {s['steady_savings_ratio']:.3g}x)")
    return 0


def sweep(args) -> int:
    g, video, base = _graph(args), _video(args), _policy(args)
    points = sweep_points(base, h_values=args.h_values, chunks=args.chunks)
    rows = cmd_sweep(g, video, points, workers=args.workers, ablate_memory=args.ablate_memory)
    with _staged(args.out_dir) as tmp:
        write_rows_csv(rows, SWEEP_COLUMNS, tmp / "sweep.csv")
    for r in rows:
        print(f"{r['point']:>8}  event MACs {r['event_macs']:>10}  savings {r['savings_ratio']:.3g}x  "
              f"max L-inf {r['max_linf']:.3g}")
    return 0


def layer_report_cmd(args) -> int:
    run_dir = Path(args.run_dir or args.out_dir)
    paths = [run_dir / "detail_conventional.json", run_dir / "detail_event.json"]
    missing = [p.name for p in paths if not p.exists()]
    if missing:
        raise ReportError(f"layer report needs traces from both modes; missing {', '.join(missing)} "
                          f"in {run_dir} (run with --mode both)")
    report = layer_report(read_detail_json(paths[0]), read_detail_json(paths[1]))
    with _staged(args.out_dir) as tmp:
        write_layer_report(report, tmp)
    for name, v in report.group_means.items():
        print(f"{name:>8}  mean ratio {'-' if v is None else f'{v:.4f}'}")
    return 0


def gen_scene(args) -> int:
    spec = _scene_spec(args)
    video = scene_generate(spec, seed=args.seed)
    with _staged(args.out_dir) as tmp:
        write_video(tmp / "video.evtv", video)
        _dump({"scene": spec.to_dict(), "seed": args.seed}, tmp / "scene.json")
    return 0


def convert(args) -> int:
    g, cfg = _graph(args), _policy(args)
    eg = convert_to_event(g, cfg)
    doc = {"policy": cfg.to_dict(), "nodes": eg.describe(),
           "inserted": [n.id for n in eg.inserted], "placement_violations": check_placement(eg)}
    with _staged(args.out_dir) as tmp:
        _dump(doc, tmp / "event_graph.json")
    print(f"{len(eg.nodes)} nodes, {len(eg.inserted)} inserted")
    return 0


def consistency(args) -> int:
    g, video, cfg = _graph(args), _video(args), _policy(args)
    if not video:
        raise ConfigError("consistency check needs at least one frame")
    eg = convert_to_event(g, cfg)
    state = initialize(eg, video[0])
    state.track_transmissions()
    rows, worst = [], {}

    def check(t, st):
        found = consistency_check(eg, st, args.tol)
        for group, err in found:
            worst[group] = max(worst.get(group, 0.0), err)
        rows.append({"frame": t, "consistency_violations": len(found),
                     "max_violation": max((e for _, e in found), default=0.0),
                     "residual_violations": sum(gate_residuals(eg, st).values()),
                     "memory_identity_error": memory_identity_error(st)})

    run_event(eg, state, video, on_frame=check, keep_outputs=False)
    ok = all(r["consistency_violations"] == 0 and r["residual_violations"] == 0 for r in rows)
    doc = {"ok": ok, "tolerance": args.tol, "frames": len(rows), "policy": cfg.to_dict(),
           "violating_groups": dict(sorted(worst.items()))}
    with _staged(args.out_dir) as tmp:
        write_rows_csv(rows, CONSISTENCY_COLUMNS, tmp / "consistency.csv")
        _dump(doc, tmp / "consistency.json")
    print("consistent" if ok else f"inconsistent: {', '.join(sorted(worst)) or 'gate residuals above threshold'}")
    return 0 if ok else 1


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evnet", description="Conventional vs event-network inference on synthetic video.")
    parser.add_argument("--version", action="version", version=f"evnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run conventional and/or event inference")
    _add_graph(p), _add_video(p), _add_policy(p)
    p.add_argument("--mode", choices=("conv", "event", "both"), default="both")
    p.add_argument("--ablate-memory", action="store_true", help="discard untransmitted changes after each frame")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=run)

    p = sub.add_parser("sweep", help="sweep thresholds or chunk sizes")
    _add_graph(p), _add_video(p), _add_policy(p)
    pts = p.add_mutually_exclusive_group(required=True)
    pts.add_argument("--h-values", type=float, nargs="+", metavar="H")
    pts.add_argument("--chunks", type=int, nargs="+", metavar="K", help="square chunk sides")
    p.add_argument("--workers", type=int, default=None, help="process count (default: CPU count)")
    p.add_argument("--ablate-memory", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=sweep)

    p = sub.add_parser("layer-report", help="per-layer cost ratios from a --mode both run")
    p.add_argument("--run-dir", help="directory holding the run outputs (default: --out-dir)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=layer_report_cmd)

    p = sub.add_parser("gen-scene", help="write a synthetic video")
    _add_scene(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=gen_scene)

    p = sub.add_parser("convert", help="dump the converted event graph")
    _add_graph(p), _add_policy(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=convert)

    p = sub.add_parser("consistency-check", help="check internal consistency after every frame")
    _add_graph(p), _add_video(p), _add_policy(p)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=consistency)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (EvnetError, OSError) as exc:
        print(f"evnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

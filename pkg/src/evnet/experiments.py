"""Experiment drivers: paired runs, threshold/granularity sweeps, layer-depth reports."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .accounting import AgreementReport, FrameTrace, json_float, safe_ratio, agreement, overhead_account
from .convert import EventState, convert_to_event, initialize
from .engine import FrameHook, RunResult, run_conventional, run_event
from .errors import ConfigError, ReportError
from .graph import NetworkGraph
from .policies import PolicyConfig

MODES = ("conv", "event", "both")
GROUPS = ("shallow", "middle", "deep")


@dataclass
class PairResult:
    conventional: RunResult | None
    event: RunResult | None
    state: EventState | None
    report: AgreementReport | None


def run_pair(g: NetworkGraph, video: Sequence[np.ndarray], cfg: PolicyConfig, mode: str = "both",
             ablate_memory: bool = False, on_frame: FrameHook | None = None,
             track: bool = False) -> PairResult:
    """Run one or both modes over ``video``; the report needs both."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    conv = ev = state = report = None
    if mode in ("conv", "both"):
        conv = run_conventional(g, video)
    if mode in ("event", "both") and len(video):
        eg = convert_to_event(g, cfg)
        state = initialize(eg, video[0])
        if track:
            state.track_transmissions()
        ev = run_event(eg, state, video, ablate_memory=ablate_memory, on_frame=on_frame)
    if conv is not None and ev is not None:
        report = agreement(ev.outputs, conv.outputs, ev.traces, conv.traces)
    return PairResult(conv, ev, state, report)


def count_inversions(values: Sequence[float], increasing: bool = True) -> int:
    """Adjacent pairs that break weak monotonicity in the given direction."""
    v = np.asarray(values, dtype=np.float64)
    steps = np.diff(v) if increasing else -np.diff(v)
    return int(np.count_nonzero(steps < 0))


# -- sweeps --------------------------------------------------------------------

SWEEP_COLUMNS = ("point", "policy", "h", "h_chunk", "chunk", "event_macs", "conventional_macs",
                 "savings_ratio", "steady_savings_ratio", "max_linf", "final_linf", "max_rel_l2",
                 "min_psnr", "arith_overhead", "mem_overhead", "transmissions")


def sweep_points(base: PolicyConfig, h_values: Sequence[float] | None = None,
                 chunks: Sequence[int] | None = None) -> list[tuple[str, PolicyConfig]]:
    """Expand an h list or a chunk-side list into labelled policy configs.

    Chunk points use k-by-k spatial chunks at the default ``h / sqrt(k)``
    chunk threshold unless ``base`` carries an explicit one.
    """
    if (h_values is None) == (chunks is None):
        raise ConfigError("give exactly one of an h list or a chunk list")
    values = list(h_values if h_values is not None else chunks)
    if len(values) < 2:
        raise ConfigError(f"a sweep needs at least 2 points, got {len(values)}")
    if h_values is not None:
        kind = "threshold" if base.kind == "exact_h0" else base.kind
        return [(repr(float(h)), replace(base, kind=kind, h=float(h))) for h in values]
    out = []
    for k in values:
        if int(k) != k or k < 1:
            raise ConfigError(f"chunk side must be a positive integer, got {k}")
        cfg = PolicyConfig("chunked_spatial", base.h, (int(k), int(k)), base.h_chunk)
        out.append((f"{int(k)}x{int(k)}", cfg))
    return out


def _event_only(args) -> RunResult:
    g, video, cfg, ablate = args
    eg = convert_to_event(g, cfg)
    return run_event(eg, initialize(eg, video[0]), video, ablate_memory=ablate, keep_outputs=False)


def cmd_sweep(g: NetworkGraph, video: Sequence[np.ndarray], points: Sequence[tuple[str, PolicyConfig]],
              workers: int | None = None, ablate_memory: bool = False) -> list[dict]:
    """One row per sweep point, in the order given.

    Event runs for separate points are independent and go to a process
    pool; the conventional baseline is shared and rows are merged here.
    """
    if len(points) < 2:
        raise ConfigError(f"a sweep needs at least 2 points, got {len(points)}")
    if not len(video):
        raise ConfigError("cannot sweep over an empty video")
    conv = run_conventional(g, video, keep_outputs=False)
    jobs = [(g, video, cfg, ablate_memory) for _, cfg in points]
    if workers == 1:
        results = [_event_only(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_event_only, jobs))
    rows = []
    for (label, cfg), ev in zip(points, results):
        rep = agreement(ev.outputs, conv.outputs, ev.traces, conv.traces)
        tot = overhead_account(ev.traces, conv.traces)
        s = rep.summary()
        rows.append({
            "point": label, "policy": cfg.kind, "h": cfg.h,
            "h_chunk": cfg.chunk_threshold if cfg.chunked else None,
            "chunk": "x".join(map(str, cfg.chunk)) if cfg.chunk else None,
            "event_macs": tot.event_macs, "conventional_macs": tot.conventional_macs,
            "savings_ratio": rep.savings_ratio, "steady_savings_ratio": rep.steady_savings_ratio,
            "max_linf": s["max_linf"], "final_linf": s["final_linf"], "max_rel_l2": s["max_rel_l2"],
            "min_psnr": s["min_psnr"], "arith_overhead": rep.arith_overhead,
            "mem_overhead": rep.mem_overhead, "transmissions": tot.transmissions,
        })
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows_csv(rows: Sequence[dict], columns: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


# -- layer-depth report --------------------------------------------------------

LAYER_COLUMNS = ("depth", "layer", "kind", "group", "event_macs", "conventional_macs", "ratio")
SERIES_COLUMNS = ("frame", "conventional_macs", "event_macs", "overhead_arith", "total_ops",
                  "shallow_macs", "middle_macs", "deep_macs")


@dataclass
class LayerReport:
    """Per-layer cost ratios by depth plus a per-frame cost series.

    Ratios compare event to conventional MACs over frames 1 onward, so the
    initialization flush does not mask the steady-state profile. Only layers
    with nonzero conventional MACs take part.
    """

    layers: list[dict]
    series: list[dict]
    group_means: dict[str, float | None]

    def spike_frames(self, factor: float = 1.5) -> list[int]:
        """Frames whose total event ops exceed ``factor`` times the steady median."""
        steady = [r for r in self.series if r["frame"] > 0]
        if not steady:
            return []
        med = float(np.median([r["total_ops"] for r in steady]))
        return [r["frame"] for r in steady if r["total_ops"] > factor * med]


def _check_modes(traces: Sequence[FrameTrace], mode: str, what: str) -> None:
    bad = sorted({t.mode for t in traces} - {mode})
    if bad:
        raise ReportError(f"{what} traces have mode {bad[0]!r}, expected {mode!r}")


def layer_report(conventional: Sequence[FrameTrace], event: Sequence[FrameTrace]) -> LayerReport:
    _check_modes(conventional, "conventional", "conventional")
    _check_modes(event, "event", "event")
    if [t.frame_index for t in conventional] != [t.frame_index for t in event]:
        raise ReportError("conventional and event traces cover different frames")
    if not conventional:
        raise ReportError("no frames to report")
    order = list(conventional[0].layers)
    steady_c = [t for t in conventional if t.frame_index > 0]
    steady_e = [t for t in event if t.frame_index > 0]

    def total(traces, layer):
        return sum(t.layers[layer].macs for t in traces if layer in t.layers)

    mac_layers = [l for l in order if total(conventional, l) > 0]
    groups = np.array_split(np.arange(len(mac_layers)), 3)
    group_of = {mac_layers[i]: name for name, idx in zip(GROUPS, groups) for i in idx}
    layers = []
    for depth, layer in enumerate(mac_layers):
        ev, cv = total(steady_e, layer), total(steady_c, layer)
        layers.append({"depth": depth, "layer": layer, "kind": conventional[0].layers[layer].kind,
                       "group": group_of[layer], "event_macs": ev, "conventional_macs": cv,
                       "ratio": safe_ratio(ev, cv)})
    means = {}
    for name in GROUPS:
        vals = [r["ratio"] for r in layers if r["group"] == name]
        means[name] = float(np.mean(vals)) if vals else None
    series = []
    for c, e in zip(conventional, event):
        row = {"frame": e.frame_index, "conventional_macs": c.macs, "event_macs": e.macs,
               "overhead_arith": e.total("overhead_arith")}
        row["total_ops"] = row["event_macs"] + row["overhead_arith"]
        for name in GROUPS:
            row[f"{name}_macs"] = sum(r.macs for k, r in e.layers.items() if group_of.get(k) == name)
        series.append(row)
    return LayerReport(layers, series, means)


def write_layer_report(report: LayerReport, directory: str | Path) -> None:
    directory = Path(directory)
    write_rows_csv(report.layers, LAYER_COLUMNS, directory / "layer_report.csv")
    write_rows_csv(report.series, SERIES_COLUMNS, directory / "layer_timeseries.csv")
    doc = {"group_mean_ratio": {k: json_float(v) for k, v in report.group_means.items()},
           "spike_frames": report.spike_frames()}
    (directory / "layer_report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def final_error_divergence(g: NetworkGraph, video: Sequence[np.ndarray], h: float) -> tuple[float, float]:
    """Final-frame L-inf error of the memory model and of the ablated model."""
    cfg = PolicyConfig("threshold", h)
    conv = run_conventional(g, video, keep_outputs=False)
    errs = []
    for ablate in (False, True):
        ev = run_pair(g, video, cfg, mode="event", ablate_memory=ablate).event
        errs.append(float(np.max(np.abs(ev.outputs[-1].astype(np.float64) - conv.outputs[-1]))))
    return errs[0], errs[1]


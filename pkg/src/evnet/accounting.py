"""Operation counting, overhead accounting and conventional/event agreement.

Overhead rules, per touched neuron:

=============  =====  ====  ======
event          loads  adds  stores
=============  =====  ====  ======
accumulator    1      1     1
gate           2      3     2
transmission   1      0     1
buffer         1      0     1
=============  =====  ====  ======

The gate's three additions include the ``|d| - h`` policy comparison. Buffer
charges have no counterpart in the original accounting and are also reported
on their own. Chunked policies read the stored ``d`` of untouched chunk
members; each such read is one extra load. Full reads of the output
accumulator are tallied as ``output_reads`` and kept out of the overhead
ratios, since conventional inference reads its output too.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ReportError, ShapeError

ACC_COST = (1, 1, 1)
GATE_COST = (2, 3, 2)
TRANSMIT_COST = (1, 0, 1)
BUFFER_COST = (1, 0, 1)

TRACE_COLUMNS = ("frame", "layer", "macs", "overhead_arith", "mem_loads", "mem_stores", "transmissions")


@dataclass
class LayerRecord:
    kind: str
    macs: int = 0
    gate_updates: int = 0
    acc_updates: int = 0
    transmissions: int = 0
    buffer_updates: int = 0
    policy_evals: int = 0
    policy_extra_reads: int = 0
    output_reads: int = 0
    nonlinear_ops: int = 0

    @property
    def overhead_arith(self) -> int:
        return (self.acc_updates * ACC_COST[1] + self.gate_updates * GATE_COST[1]
                + self.transmissions * TRANSMIT_COST[1] + self.buffer_updates * BUFFER_COST[1])

    @property
    def overhead_mem_loads(self) -> int:
        return (self.acc_updates * ACC_COST[0] + self.gate_updates * GATE_COST[0]
                + self.transmissions * TRANSMIT_COST[0] + self.buffer_updates * BUFFER_COST[0]
                + self.policy_extra_reads)

    @property
    def overhead_mem_stores(self) -> int:
        return (self.acc_updates * ACC_COST[2] + self.gate_updates * GATE_COST[2]
                + self.transmissions * TRANSMIT_COST[2] + self.buffer_updates * BUFFER_COST[2])

    @property
    def buffer_loads(self) -> int:
        return self.buffer_updates * BUFFER_COST[0]

    @property
    def buffer_stores(self) -> int:
        return self.buffer_updates * BUFFER_COST[2]


@dataclass
class FrameTrace:
    frame_index: int
    mode: str
    layers: dict[str, LayerRecord] = field(default_factory=dict)
    output: np.ndarray | None = None

    def record(self, layer_id: str, kind: str) -> LayerRecord:
        if layer_id not in self.layers:
            self.layers[layer_id] = LayerRecord(kind)
        return self.layers[layer_id]

    def total(self, attr: str) -> int:
        return sum(getattr(r, attr) for r in self.layers.values())

    @property
    def macs(self) -> int:
        return self.total("macs")


@dataclass
class OverheadTotals:
    arith: int
    mem_loads: int
    mem_stores: int
    buffer_loads: int
    buffer_stores: int
    output_reads: int
    policy_extra_reads: int
    transmissions: int
    event_macs: int
    conventional_macs: int

    @property
    def macs_saved(self) -> int:
        return self.conventional_macs - self.event_macs

    @property
    def arith_ratio(self) -> float:
        return safe_ratio(self.arith, self.macs_saved)

    @property
    def mem_ratio(self) -> float:
        return safe_ratio(self.mem_loads + self.mem_stores, self.macs_saved)


def safe_ratio(num: float, den: float) -> float:
    if den == 0:
        return 0.0 if num == 0 else math.inf
    return num / den


def overhead_account(event_traces: Sequence[FrameTrace],
                     conventional_traces: Sequence[FrameTrace] | None) -> OverheadTotals:
    if conventional_traces is None:
        raise ReportError("overhead ratios need a conventional baseline")
    recs = [r for t in event_traces for r in t.layers.values()]
    return OverheadTotals(
        arith=sum(r.overhead_arith for r in recs),
        mem_loads=sum(r.overhead_mem_loads for r in recs),
        mem_stores=sum(r.overhead_mem_stores for r in recs),
        buffer_loads=sum(r.buffer_loads for r in recs),
        buffer_stores=sum(r.buffer_stores for r in recs),
        output_reads=sum(r.output_reads for r in recs),
        policy_extra_reads=sum(r.policy_extra_reads for r in recs),
        transmissions=sum(r.transmissions for r in recs),
        event_macs=sum(r.macs for r in recs),
        conventional_macs=sum(t.macs for t in conventional_traces),
    )


@dataclass
class AgreementReport:
    rel_l2: list[float]
    linf: list[float]
    psnr: list[float]
    peak: float
    savings_ratio: float | None = None
    steady_savings_ratio: float | None = None
    macs_saved: int | None = None
    arith_overhead: float | None = None
    mem_overhead: float | None = None

    def summary(self) -> dict:
        finite_psnr = [p for p in self.psnr if math.isfinite(p)]
        return {
            "frames": len(self.linf),
            "max_linf": max(self.linf, default=0.0),
            "final_linf": self.linf[-1] if self.linf else 0.0,
            "max_rel_l2": max(self.rel_l2, default=0.0),
            "min_psnr": min(self.psnr, default=math.inf),
            "mean_finite_psnr": float(np.mean(finite_psnr)) if finite_psnr else None,
            "peak": self.peak,
            "savings_ratio": self.savings_ratio,
            "steady_savings_ratio": self.steady_savings_ratio,
            "macs_saved": self.macs_saved,
            "arith_overhead": self.arith_overhead,
            "mem_overhead": self.mem_overhead,
        }


def psnr(estimate: np.ndarray, reference: np.ndarray, peak: float) -> float:
    mse = float(np.mean((np.asarray(estimate, np.float64) - np.asarray(reference, np.float64)) ** 2))
    if mse == 0:
        return math.inf
    if peak == 0:
        return -math.inf
    return 20.0 * math.log10(peak / math.sqrt(mse))


def agreement(outputs_event: Sequence[np.ndarray], outputs_conventional: Sequence[np.ndarray],
              event_traces: Sequence[FrameTrace] | None = None,
              conventional_traces: Sequence[FrameTrace] | None = None) -> AgreementReport:
    """Per-frame error metrics plus savings/overhead when traces are supplied.

    The PSNR peak is the largest absolute conventional output over the whole
    video. Savings include frame 0, where the event network pays a full
    initialization pass; ``steady_savings_ratio`` excludes it.
    """
    if len(outputs_event) != len(outputs_conventional):
        raise ShapeError(f"{len(outputs_event)} event frames vs {len(outputs_conventional)} conventional")
    for e, c in zip(outputs_event, outputs_conventional):
        if np.shape(e) != np.shape(c):
            raise ShapeError(f"output shapes differ: {np.shape(e)} vs {np.shape(c)}")
    peak = max((float(np.max(np.abs(c))) for c in outputs_conventional), default=0.0)
    rel, linf, ps = [], [], []
    for e, c in zip(outputs_event, outputs_conventional):
        diff = np.asarray(e, np.float64) - np.asarray(c, np.float64)
        norm_c = float(np.linalg.norm(c))
        norm_d = float(np.linalg.norm(diff))
        rel.append(safe_ratio(norm_d, norm_c))
        linf.append(float(np.max(np.abs(diff))) if diff.size else 0.0)
        ps.append(psnr(e, c, peak))
    report = AgreementReport(rel, linf, ps, peak)
    if event_traces is not None and conventional_traces is not None:
        totals = overhead_account(event_traces, conventional_traces)
        report.macs_saved = totals.macs_saved
        report.savings_ratio = safe_ratio(totals.conventional_macs, totals.event_macs)
        steady_ev = sum(t.macs for t in event_traces if t.frame_index > 0)
        steady_cv = sum(t.macs for t in conventional_traces if t.frame_index > 0)
        report.steady_savings_ratio = safe_ratio(steady_cv, steady_ev)
        report.arith_overhead = totals.arith_ratio
        report.mem_overhead = totals.mem_ratio
    return report


# -- file output ---------------------------------------------------------------

def write_trace_csv(traces: Iterable[FrameTrace], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for t in traces:
            for layer_id, r in t.layers.items():
                w.writerow([t.frame_index, layer_id, r.macs, r.overhead_arith,
                            r.overhead_mem_loads, r.overhead_mem_stores, r.transmissions])


def read_trace_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != TRACE_COLUMNS:
        raise ReportError(f"{path} does not have trace columns {TRACE_COLUMNS}")
    return [{k: (v if k == "layer" else int(v)) for k, v in row.items()} for row in rows]


def write_detail_json(traces: Iterable[FrameTrace], path: str | Path) -> None:
    """All raw counters per frame and layer, for inspection beyond the CSV columns."""
    doc = [{"frame": t.frame_index, "mode": t.mode,
            "layers": {k: {f.name: getattr(r, f.name) for f in fields(r)} for k, r in t.layers.items()}}
           for t in traces]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_detail_json(path: str | Path) -> list[FrameTrace]:
    try:
        doc = json.loads(Path(path).read_text())
        return [FrameTrace(int(t["frame"]), t["mode"],
                           {k: LayerRecord(**r) for k, r in t["layers"].items()}) for t in doc]
    except (KeyError, TypeError, ValueError) as exc:
        raise ReportError(f"{path}: not a detail trace file ({exc})") from exc


def json_float(x):
    if x is None:
        return None
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else "-inf"
    return x


def write_agreement(report: AgreementReport, csv_path: str | Path, json_path: str | Path,
                    extra: dict | None = None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "rel_l2", "linf", "psnr"])
        for i, (r, l, p) in enumerate(zip(report.rel_l2, report.linf, report.psnr)):
            w.writerow([i, repr(r), repr(l), repr(p)])
    doc = {k: json_float(v) for k, v in report.summary().items()}
    if extra:
        doc.update({k: json_float(v) for k, v in extra.items()})
    Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def totals_dict(totals: OverheadTotals) -> dict:
    out = asdict(totals)
    out.update(macs_saved=totals.macs_saved, arith_ratio=totals.arith_ratio, mem_ratio=totals.mem_ratio)
    return out

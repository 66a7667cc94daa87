"""Frame-synchronous execution of conventional and event networks over video.

Event execution walks the event graph in topological order once per frame;
every delta produced in a frame reaches its consumers before the next frame
starts. A signal between nodes is either a delta packet or a sparse value
update ``(touched indices, current values)``.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from .accounting import FrameTrace
from .convert import EventGraph, EventState
from .errors import EvnetError, ShapeError, StateError
from .graph import NetworkGraph
from .layers import (
    delta_forward_linear,
    dense_forward,
    dense_nonlinear_ops,
    maxpool_event,
    pointwise_recompute,
)
from .policies import evaluate, thresholds
from .tensor import DTYPE, INDEX_DTYPE, DeltaPacket, as_tensor


class RunResult(NamedTuple):
    outputs: list[np.ndarray]
    traces: list[FrameTrace]


class ValueUpdate(NamedTuple):
    indices: np.ndarray
    values: np.ndarray


def _located(exc: EvnetError, frame: int, layer: str) -> EvnetError:
    new = type(exc)(f"frame {frame}, layer {layer!r}: {exc}")
    new.__cause__ = exc
    return new


def run_conventional(g: NetworkGraph, video: Sequence[np.ndarray],
                     keep_outputs: bool = True) -> RunResult:
    outputs, traces = [], []
    for t, frame in enumerate(video):
        frame = as_tensor(frame)
        if frame.shape != g.input_shape:
            raise ShapeError(f"frame {t}: shape {frame.shape} != network input {g.input_shape}")
        trace = FrameTrace(t, "conventional")
        values = {}
        for layer in g.layers:
            try:
                if layer.kind == "input":
                    values[layer.id] = frame
                    continue
                ins = [values[i] for i in layer.inputs]
                values[layer.id], macs = dense_forward(layer, ins)
            except EvnetError as exc:
                raise _located(exc, t, layer.id) from exc
            if layer.kind == "output":
                continue
            rec = trace.record(layer.id, layer.kind)
            rec.macs += macs
            rec.nonlinear_ops += dense_nonlinear_ops(layer, g.shapes[layer.id], len(ins))
        out = values[g.output.id].copy()
        outputs.append(out)
        if keep_outputs:
            trace.output = out
        traces.append(trace)
    return RunResult(outputs, traces)


FrameHook = Callable[[int, EventState], None]


def run_event(eg: EventGraph, state: EventState, video: Sequence[np.ndarray],
              ablate_memory: bool = False, on_frame: FrameHook | None = None,
              keep_outputs: bool = True) -> RunResult:
    """Run the event network over ``video``.

    ``state`` must come from :func:`evnet.convert.initialize` with
    ``video[0]`` as canonical input. Frame 0's output is the flushed output
    accumulator and its trace carries the flush MACs. ``on_frame`` is called
    after every completed frame (including frame 0) with the live state.
    With ``ablate_memory`` every gate forgets its untransmitted remainder
    after each policy evaluation.
    """
    if not state.initialized:
        raise StateError("event state is not initialized")
    if state.frames_done:
        raise StateError("event state has already consumed a video; re-initialize")
    if not len(video):
        return RunResult([], [])
    first = as_tensor(video[0])
    if first.shape != state.canonical.shape or not np.array_equal(first, state.canonical):
        raise StateError("frame 0 does not match the canonical input used for initialization")

    with state.claim():
        out_acc = eg.output_accumulator.id
        trace0 = FrameTrace(0, "event")
        for node in eg.nodes:
            if node.id in state.init_macs:
                trace0.record(node.id, node.kind).macs += state.init_macs[node.id]
        outputs = [state.accumulators[out_acc].copy()]
        if keep_outputs:
            trace0.output = outputs[0]
        traces = [trace0]
        state.frames_done = 1
        if on_frame is not None:
            on_frame(0, state)
        for t in range(1, len(video)):
            frame = as_tensor(video[t])
            if frame.shape != eg.base.input_shape:
                raise ShapeError(f"frame {t}: shape {frame.shape} != network input {eg.base.input_shape}")
            trace = _event_frame(eg, state, frame, t, ablate_memory)
            out = state.accumulators[out_acc].copy()
            outputs.append(out)
            if keep_outputs:
                trace.output = out
            traces.append(trace)
            state.frames_done += 1
            if on_frame is not None:
                on_frame(t, state)
    return RunResult(outputs, traces)


def _empty_packet(node_id: str, shape) -> DeltaPacket:
    return DeltaPacket.empty(node_id, size=int(np.prod(shape)))


def _event_frame(eg: EventGraph, state: EventState, frame: np.ndarray, t: int,
                 ablate: bool) -> FrameTrace:
    trace = FrameTrace(t, "event")
    signals: dict[str, DeltaPacket | ValueUpdate | None] = {}
    output_ids = {eg.base.output.id}
    for node in eg.nodes:
        try:
            signals[node.id] = _step(eg, state, node, frame, t, ablate, signals, trace, output_ids)
        except EvnetError as exc:
            raise _located(exc, t, node.id) from exc
    return trace


def _step(eg, state, node, frame, t, ablate, signals, trace, output_ids):
    kind = node.kind
    if kind == "input":
        return ValueUpdate(np.arange(frame.size, dtype=INDEX_DTYPE), frame.reshape(-1))
    if kind == "output":
        return None
    src = signals.get(node.inputs[0]) if node.inputs else None
    rec = trace.record(node.id, kind)

    if kind == "gate":
        if src is None or not len(src.indices):
            return None
        b, d = state.gates[node.id]
        bf, df = b.reshape(-1), d.reshape(-1)
        idx, v = src.indices, src.values
        df[idx] += v - bf[idx]
        bf[idx] = v
        rec.gate_updates += idx.size
        mask = evaluate(d, idx, eg.policy, key=node.source)
        rec.policy_evals += mask.evaluated
        rec.policy_extra_reads += max(mask.evaluated - idx.size, 0)
        fire = mask.fire
        sent = df[fire].copy()
        df[fire] = 0
        rec.transmissions += fire.size
        if state.sent is not None:
            state.sent[node.id].reshape(-1)[fire] += sent
        if ablate:
            df[idx] = 0
        nz = sent != 0
        return DeltaPacket(node.id, fire[nz], sent[nz], t, df.size)

    if kind == "accumulator":
        a = state.accumulators[node.id].reshape(-1)
        if any(c.id in output_ids for c in eg.consumers(node.id)):
            rec.output_reads += a.size
        if src is None or not len(src):
            return None
        a[src.indices] += src.values
        rec.acc_updates += len(src)
        return ValueUpdate(src.indices, a[src.indices].copy())

    if kind == "buffer":
        if src is None or not len(src.indices):
            return None
        x = state.buffers[node.id].reshape(-1)
        x[src.indices] = src.values
        rec.buffer_updates += src.indices.size
        return src

    layer = node.layer
    if layer.excluded:
        if all(signals.get(i) is None for i in node.inputs):
            return None
        out, macs = dense_forward(layer, [state.buffers[i] for i in node.inputs])
        rec.macs += macs
        rec.nonlinear_ops += dense_nonlinear_ops(layer, node.shape, len(node.inputs))
        return ValueUpdate(np.arange(out.size, dtype=INDEX_DTYPE), out.reshape(-1))

    if layer.linear:
        in_shapes = [eg[i].shape for i in node.inputs]
        packets = []
        for i, shape in zip(node.inputs, in_shapes):
            s = signals.get(i)
            packets.append(s if s is not None else _empty_packet(i, shape))
        if not any(len(p) for p in packets):
            return None
        packet, macs = delta_forward_linear(layer, packets, in_shapes)
        rec.macs += macs
        rec.nonlinear_ops += sum(len(p) for p in packets) if layer.kind == "add" else 0
        return DeltaPacket(node.id, packet.indices, packet.values, t, packet.size)

    if kind == "relu":
        if src is None or not len(src.indices):
            return None
        vals, ops = pointwise_recompute("relu", src.values)
        rec.nonlinear_ops += ops
        return ValueUpdate(src.indices, vals)

    if kind == "max_pool":
        if src is None or not len(src.indices):
            return None
        idx, vals, comps = maxpool_event(layer, state.buffers[node.inputs[0]], src.indices)
        rec.nonlinear_ops += comps
        return ValueUpdate(idx, vals)

    raise StateError(f"no event semantics for node kind {kind!r}")


def gate_residuals(eg: EventGraph, state: EventState) -> dict[str, int]:
    """Count gate neurons whose stored |d| exceeds their threshold h_i."""
    out = {}
    for node in eg.of_kind("gate"):
        b, d = state.gates[node.id]
        idx = np.arange(d.size, dtype=INDEX_DTYPE)
        h_i = thresholds(eg.policy, d.shape, idx, node.source)
        out[node.id] = int(np.count_nonzero(np.abs(d.reshape(-1)) > h_i))
    return out


def memory_identity_error(state: EventState) -> float:
    """Largest |(b - d) - (b0 + sum of transmitted deltas)| over all gates."""
    if state.sent is None:
        raise StateError("transmission tracking is off; call state.track_transmissions()")
    worst = 0.0
    for key, (b, d) in state.gates.items():
        believed = b.astype(np.float64) - d
        worst = max(worst, float(np.max(np.abs(believed - state.sent[key]))))
    return worst

"""Conversion of a conventional graph into an event graph, and event state.

Conversion inserts three kinds of state node:

* gate (b, d): value-based in, delta-based out, applies the transmission policy
* accumulator (a): delta-based in, value-based out
* buffer (x): stores the full input of a non-pointwise nonlinear layer

Placement is done in two passes. The first pass follows every linear layer
with an accumulator and puts a gate in front of every linear input that
carries values; nonlinear inputs that carry deltas get an accumulator. The
second pass fuses accumulator->gate chains, which would otherwise turn a
delta stream into values and straight back into deltas.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConversionError, ShapeError, StateError
from .graph import COMPUTE_KINDS, LINEAR_KINDS, LayerSpec, NetworkGraph
from .layers import dense_forward
from .policies import PolicyConfig
from .tensor import DTYPE, as_tensor

STATE_KINDS = frozenset({"gate", "accumulator", "buffer"})
_DELTA_KINDS = frozenset({"gate"}) | LINEAR_KINDS


@dataclass(frozen=True)
class EventNode:
    id: str
    kind: str
    inputs: tuple[str, ...]
    shape: tuple[int, ...]
    layer: LayerSpec | None = None
    source: str | None = None  # base layer whose output a state node holds

    @property
    def is_state(self) -> bool:
        return self.kind in STATE_KINDS

    @property
    def emits_delta(self) -> bool:
        if self.layer is not None and self.layer.excluded:
            return False
        return self.kind in _DELTA_KINDS


@dataclass(frozen=True)
class EventGraph:
    base: NetworkGraph
    nodes: tuple[EventNode, ...]
    policy: PolicyConfig
    placement: Mapping[tuple[str, str], tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {n.id: n for n in self.nodes})

    def __getitem__(self, node_id: str) -> EventNode:
        return self._by_id[node_id]

    def __iter__(self):
        return iter(self.nodes)

    @property
    def inserted(self) -> list[EventNode]:
        return [n for n in self.nodes if n.is_state]

    def of_kind(self, kind: str) -> list[EventNode]:
        return [n for n in self.nodes if n.kind == kind]

    def consumers(self, node_id: str) -> list[EventNode]:
        return [n for n in self.nodes if node_id in n.inputs]

    @property
    def input_gate(self) -> EventNode:
        src = self.base.input.id
        return next(n for n in self.nodes if n.kind == "gate" and n.inputs == (src,))

    @property
    def output_accumulator(self) -> EventNode:
        return self[self[self.base.output.id].inputs[0]]

    def describe(self) -> list[dict]:
        return [{"id": n.id, "kind": n.kind, "inputs": list(n.inputs), "shape": list(n.shape),
                 **({"source": n.source} if n.source else {})} for n in self.nodes]


def _needs_values(layer: LayerSpec) -> bool:
    return layer.kind in ("relu", "max_pool") or layer.excluded


def _needs_buffer(layer: LayerSpec) -> bool:
    return layer.kind == "max_pool" or layer.excluded


def convert_to_event(g: NetworkGraph, policy: PolicyConfig | None = None) -> EventGraph:
    policy = policy or PolicyConfig("threshold", 0.0)
    nodes: dict[str, EventNode] = {}
    order: list[str] = []
    producer: dict[str, str] = {}  # base layer id -> event node carrying its output
    shared: dict[tuple[str, str], str] = {}

    def add(node: EventNode) -> str:
        if node.id in nodes:
            raise ConversionError(f"node id collision on {node.id!r}")
        nodes[node.id] = node
        order.append(node.id)
        return node.id

    def convert(src_node: str, kind: str) -> str:
        key = (src_node, kind)
        if key not in shared:
            base_src = nodes[src_node].source or src_node
            suffix = {"gate": "gate", "accumulator": "acc"}[kind]
            shared[key] = add(EventNode(f"{src_node}/{suffix}", kind, (src_node,),
                                        nodes[src_node].shape, source=base_src))
        return shared[key]

    for layer in g.layers:
        shape = g.shapes[layer.id]
        if layer.kind == "input":
            add(EventNode(layer.id, "input", (), shape, layer))
            producer[layer.id] = convert(layer.id, "gate")
            continue
        if layer.kind == "output":
            src = producer[layer.inputs[0]]
            if nodes[src].kind != "accumulator":
                if not nodes[src].emits_delta:
                    src = convert(src, "gate")
                src = convert(src, "accumulator")
            add(EventNode(layer.id, "output", (src,), shape, layer))
            continue
        if layer.kind not in COMPUTE_KINDS:
            raise ConversionError(f"cannot convert layer kind {layer.kind!r}")

        ins = []
        for pos, base_in in enumerate(layer.inputs):
            src = producer[base_in]
            if _needs_values(layer):
                if nodes[src].emits_delta:
                    src = convert(src, "accumulator")
                if _needs_buffer(layer):
                    tag = "buffer" if len(layer.inputs) == 1 else f"buffer{pos}"
                    src = add(EventNode(f"{layer.id}/{tag}", "buffer", (src,), nodes[src].shape,
                                        source=nodes[src].source or src))
            elif not nodes[src].emits_delta:
                src = convert(src, "gate")
            ins.append(src)
        add(EventNode(layer.id, layer.kind, tuple(ins), shape, layer))
        if layer.linear and not layer.excluded:
            producer[layer.id] = convert(layer.id, "accumulator")
        else:
            producer[layer.id] = layer.id

    nodes, order = _fuse(nodes, order)
    eg_nodes = tuple(nodes[i] for i in order)
    eg = EventGraph(g, eg_nodes, policy, _placement(g, nodes))
    problems = check_placement(eg)
    if problems:
        raise ConversionError("; ".join(problems))
    return eg


def _fuse(nodes: dict[str, EventNode], order: list[str]):
    """Remove gates fed directly by an accumulator; drop accumulators left unused."""
    nodes = dict(nodes)
    changed = True
    while changed:
        changed = False
        for gid in order:
            gate = nodes.get(gid)
            if gate is None or gate.kind != "gate":
                continue
            acc = nodes[gate.inputs[0]]
            if acc.kind != "accumulator":
                continue
            upstream = acc.inputs[0]
            for nid in order:
                n = nodes.get(nid)
                if n is not None and gid in n.inputs:
                    nodes[nid] = EventNode(n.id, n.kind, tuple(upstream if i == gid else i for i in n.inputs),
                                           n.shape, n.layer, n.source)
            del nodes[gid]
            if not any(acc.id in n.inputs for n in nodes.values()):
                del nodes[acc.id]
            changed = True
    return nodes, [i for i in order if i in nodes]


def _placement(g: NetworkGraph, nodes: Mapping[str, EventNode]) -> dict[tuple[str, str], tuple[str, ...]]:
    base_ids = {layer.id for layer in g.layers}
    out = {}
    for layer in g.layers:
        if layer.id not in nodes:
            continue
        for src in nodes[layer.id].inputs:
            chain = []
            while src not in base_ids:
                chain.append(src)
                src = nodes[src].inputs[0]
            out[(src, layer.id)] = tuple(reversed(chain))
    return out


def check_placement(eg: EventGraph) -> list[str]:
    """Placement invariants; returns human-readable violations (empty when valid)."""
    problems = []
    nodes = {n.id: n for n in eg.nodes}
    inp = eg.base.input.id
    first = [n for n in eg.nodes if inp in n.inputs]
    if len(first) != 1 or first[0].kind != "gate":
        problems.append("input must feed exactly one gate")
    out = nodes.get(eg.base.output.id)
    if out is None or nodes[out.inputs[0]].kind != "accumulator":
        problems.append("output must be fed by an accumulator")
    for n in eg.nodes:
        srcs = [nodes[i] for i in n.inputs]
        layer = n.layer
        if n.kind in LINEAR_KINDS and layer is not None and not layer.excluded:
            bad = [s.id for s in srcs if not s.emits_delta]
            if bad:
                problems.append(f"linear {n.id!r} receives values from {bad}")
        if n.kind in ("relu", "max_pool") or (layer is not None and layer.excluded):
            bad = [s.id for s in srcs if s.emits_delta]
            if bad:
                problems.append(f"nonlinear {n.id!r} receives deltas from {bad}")
            if (n.kind == "max_pool" or layer.excluded) and any(s.kind != "buffer" for s in srcs):
                problems.append(f"{n.id!r} is not preceded by a buffer")
        if n.kind == "gate" and srcs and srcs[0].kind == "accumulator":
            problems.append(f"unfused accumulator->gate chain at {n.id!r}")
        if n.kind == "accumulator" and srcs and not srcs[0].emits_delta:
            problems.append(f"accumulator {n.id!r} fed by values")
        if n.kind == "gate" and srcs and srcs[0].emits_delta:
            problems.append(f"gate {n.id!r} fed by deltas")
    return problems


# -- state --------------------------------------------------------------------

@dataclass
class EventState:
    """Mutable per-network state. Owned by one executor at a time."""

    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    gates: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    initialized: bool = False
    canonical: np.ndarray | None = None
    init_macs: dict[str, int] = field(default_factory=dict)
    init_nonlinear_ops: dict[str, int] = field(default_factory=dict)
    frames_done: int = 0
    # b0 + sum of transmitted deltas per gate, kept in float64 when tracking is on
    sent: dict[str, np.ndarray] | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @contextmanager
    def claim(self):
        """Exclusive ownership for the duration of an executor run."""
        if not self._lock.acquire(blocking=False):
            raise StateError("event state is already owned by another executor")
        try:
            yield self
        finally:
            self._lock.release()

    def track_transmissions(self) -> None:
        self.sent = {k: b.astype(np.float64) - d for k, (b, d) in self.gates.items()}

    def all_finite(self) -> bool:
        arrays = list(self.accumulators.values()) + list(self.buffers.values())
        arrays += [t for pair in self.gates.values() for t in pair]
        return all(np.all(np.isfinite(a)) for a in arrays)


def initialize(eg: EventGraph, canonical: np.ndarray) -> EventState:
    """Flush ``canonical`` through the network: a = g(b_in), b = f(a), d = 0."""
    canonical = as_tensor(canonical)
    if canonical.shape != eg.base.input_shape:
        raise ShapeError(f"canonical input {canonical.shape} != network input {eg.base.input_shape}")
    state = EventState(canonical=canonical.copy())
    values: dict[str, np.ndarray] = {}
    for node in eg.nodes:
        if node.kind == "input":
            values[node.id] = canonical
        elif node.kind == "gate":
            b = values[node.inputs[0]].astype(DTYPE, copy=True)
            state.gates[node.id] = (b, np.zeros_like(b))
            values[node.id] = b
        elif node.kind == "accumulator":
            a = values[node.inputs[0]].astype(DTYPE, copy=True)
            state.accumulators[node.id] = a
            values[node.id] = a
        elif node.kind == "buffer":
            x = values[node.inputs[0]].astype(DTYPE, copy=True)
            state.buffers[node.id] = x
            values[node.id] = x
        elif node.kind == "output":
            values[node.id] = values[node.inputs[0]]
        else:
            _require_weights(node.layer)
            out, macs = dense_forward(node.layer, [values[i] for i in node.inputs])
            values[node.id] = out
            state.init_macs[node.id] = macs
    state.initialized = True
    return state


def _require_weights(layer: LayerSpec) -> None:
    need = {"conv2d": ("weight",), "fully_connected": ("weight",), "affine": ("scale",)}
    for key in need.get(layer.kind, ()):
        w = layer.weights.get(key)
        if w is None:
            raise StateError(f"layer {layer.id!r} has no {key!r} tensor")
        if not np.all(np.isfinite(w)):
            raise StateError(f"layer {layer.id!r} {key!r} tensor is not finite")


def _report_groups(eg: EventGraph) -> dict[str, str]:
    """Attribute each state node to the neuron layer it belongs to.

    A neuron layer is closed by its gate; accumulators and buffers report
    under the first gate their values reach through nonlinear layers.
    """
    groups = {}
    for node in eg.nodes:
        if node.kind not in ("accumulator", "buffer"):
            groups[node.id] = node.id
            continue
        frontier, seen, found = [node.id], set(), None
        while frontier and found is None:
            nxt = []
            for nid in frontier:
                for c in eg.consumers(nid):
                    if c.id in seen:
                        continue
                    seen.add(c.id)
                    if c.kind == "gate":
                        found = c.id
                        break
                    if not c.emits_delta and c.kind != "output":
                        nxt.append(c.id)
                if found:
                    break
            frontier = nxt
        groups[node.id] = found or node.id
    return groups


def consistency_check(eg: EventGraph, s: EventState, tol: float = 1e-5) -> list[tuple[str, float]]:
    """Check a = g(b_in - d_in) and b = f(a) everywhere.

    Returns ``(neuron_layer, max_violation)`` pairs above ``tol``; an empty
    list means the state is internally consistent.
    """
    if not s.initialized:
        raise StateError("state is not initialized")
    groups = _report_groups(eg)
    worst: dict[str, float] = {}
    expected: dict[str, np.ndarray] = {}

    def flag(node_id: str, have: np.ndarray, want: np.ndarray) -> None:
        v = float(np.max(np.abs(have.astype(np.float64) - want))) if have.size else 0.0
        if not np.isfinite(v):
            v = float("inf")
        g = groups[node_id]
        worst[g] = max(worst.get(g, 0.0), v)

    input_gate = eg.input_gate.id
    for node in eg.nodes:
        if node.kind == "input":
            expected[node.id] = s.gates[input_gate][0]
        elif node.kind == "gate":
            b, d = s.gates[node.id]
            if node.id != input_gate:
                flag(node.id, b, expected[node.inputs[0]])
            expected[node.id] = (b - d).astype(DTYPE)
        elif node.kind == "accumulator":
            a = s.accumulators[node.id]
            flag(node.id, a, expected[node.inputs[0]])
            expected[node.id] = a
        elif node.kind == "buffer":
            x = s.buffers[node.id]
            flag(node.id, x, expected[node.inputs[0]])
            expected[node.id] = x
        elif node.kind == "output":
            continue
        else:
            expected[node.id], _ = dense_forward(node.layer, [expected[i] for i in node.inputs])
    order = [n.id for n in eg.nodes]
    return sorted(((k, v) for k, v in worst.items() if v > tol), key=lambda kv: order.index(kv[0]))

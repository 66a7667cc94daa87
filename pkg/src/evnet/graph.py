"""Conventional network description: a validated DAG of layers with weights."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import jsonschema
import numpy as np

from .errors import GraphError, SchemaError, ShapeError
from .tensor import as_tensor, read_tensor

LINEAR_KINDS = frozenset({"conv2d", "fully_connected", "avg_pool", "affine", "add", "concat"})
NONLINEAR_KINDS = frozenset({"relu", "max_pool"})
POINTWISE_KINDS = frozenset({"relu"})
COMPUTE_KINDS = LINEAR_KINDS | NONLINEAR_KINDS
ALL_KINDS = COMPUTE_KINDS | {"input", "output"}

# params that name an entry of the document's "weights" table
_WEIGHT_PARAMS = {
    "conv2d": ("weight", "bias"),
    "fully_connected": ("weight", "bias"),
    "affine": ("scale", "shift"),
}
_BATCHNORM_KEYS = ("gamma", "beta", "mean", "var")


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    params: Mapping[str, Any] = field(default_factory=dict)
    weights: Mapping[str, np.ndarray] = field(default_factory=dict, compare=False)

    @property
    def linear(self) -> bool:
        return self.kind in LINEAR_KINDS

    @property
    def nonlinear(self) -> bool:
        return self.kind in NONLINEAR_KINDS

    @property
    def excluded(self) -> bool:
        """Marked to run densely inside an otherwise converted network."""
        return bool(self.params.get("exclude", False))


@dataclass(frozen=True)
class NetworkGraph:
    """Layers in topological order plus inferred output shapes."""

    layers: tuple[LayerSpec, ...]
    shapes: Mapping[str, tuple[int, ...]]

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {layer.id: layer for layer in self.layers})

    def __getitem__(self, layer_id: str) -> LayerSpec:
        return self._by_id[layer_id]

    def __iter__(self):
        return iter(self.layers)

    @property
    def input(self) -> LayerSpec:
        return next(layer for layer in self.layers if layer.kind == "input")

    @property
    def output(self) -> LayerSpec:
        return next(layer for layer in self.layers if layer.kind == "output")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.shapes[self.input.id]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[self.output.id]

    def consumers(self, layer_id: str) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer_id in layer.inputs]

    def compute_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind in COMPUTE_KINDS]


def _toposort(specs: Sequence[LayerSpec]) -> list[LayerSpec]:
    position = {spec.id: i for i, spec in enumerate(specs)}
    indegree = {spec.id: 0 for spec in specs}
    children: dict[str, list[str]] = {spec.id: [] for spec in specs}
    for spec in specs:
        for src in spec.inputs:
            if src not in position:
                raise GraphError(f"layer {spec.id!r} reads unknown input {src!r}")
            children[src].append(spec.id)
            indegree[spec.id] += 1
    ready = [position[i] for i, n in indegree.items() if n == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        spec = specs[heapq.heappop(ready)]
        order.append(spec)
        for child in children[spec.id]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(ready, position[child])
    if len(order) != len(specs):
        stuck = sorted(i for i, n in indegree.items() if n > 0)
        raise GraphError(f"graph contains a cycle through {stuck}")
    return order


def _window(params, name="window") -> tuple[int, int]:
    w = params.get(name)
    if w is None:
        raise SchemaError(f"missing {name!r}")
    if isinstance(w, int):
        return (w, w)
    return (int(w[0]), int(w[1]))


def _conv_out(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def infer_shape(spec: LayerSpec, in_shapes: Sequence[tuple[int, ...]]) -> tuple[int, ...]:
    """Output shape of ``spec`` given its input shapes; validates weights."""
    kind, p, w = spec.kind, spec.params, spec.weights

    def single():
        if len(in_shapes) != 1:
            raise GraphError(f"{kind} layer {spec.id!r} takes exactly one input")
        return in_shapes[0]

    if kind == "input":
        if in_shapes:
            raise GraphError(f"input layer {spec.id!r} cannot have inputs")
        shape = tuple(int(s) for s in p["shape"])
        if not shape or any(s < 1 for s in shape):
            raise ShapeError(f"bad input shape {shape}")
        return shape
    if kind in ("output", "relu"):
        return single()
    if kind == "conv2d":
        shape = single()
        if len(shape) != 3:
            raise ShapeError(f"conv2d {spec.id!r} needs a (C, H, W) input, got {shape}")
        weight = w["weight"]
        if weight.ndim != 4 or weight.shape[1] != shape[0]:
            raise ShapeError(f"conv2d {spec.id!r} weight {weight.shape} does not match input {shape}")
        if "bias" in w and w["bias"].shape != (weight.shape[0],):
            raise ShapeError(f"conv2d {spec.id!r} bias shape {w['bias'].shape}")
        stride, pad = int(p.get("stride", 1)), int(p.get("padding", 0))
        ho = _conv_out(shape[1], weight.shape[2], stride, pad)
        wo = _conv_out(shape[2], weight.shape[3], stride, pad)
        if stride < 1 or pad < 0 or ho < 1 or wo < 1:
            raise ShapeError(f"conv2d {spec.id!r} has no valid output positions")
        return (weight.shape[0], ho, wo)
    if kind == "fully_connected":
        shape = single()
        weight = w["weight"]
        if weight.ndim != 2 or weight.shape[1] != int(np.prod(shape)):
            raise ShapeError(f"fully_connected {spec.id!r} weight {weight.shape} does not match input {shape}")
        if "bias" in w and w["bias"].shape != (weight.shape[0],):
            raise ShapeError(f"fully_connected {spec.id!r} bias shape {w['bias'].shape}")
        return (weight.shape[0],)
    if kind in ("avg_pool", "max_pool"):
        shape = single()
        if len(shape) != 3:
            raise ShapeError(f"{kind} {spec.id!r} needs a (C, H, W) input, got {shape}")
        kh, kw = _window(p)
        sh, sw = _window(p, "stride") if "stride" in p else (kh, kw)
        ho, wo = (shape[1] - kh) // sh + 1, (shape[2] - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{kind} {spec.id!r} window larger than input")
        return (shape[0], ho, wo)
    if kind == "affine":
        shape = single()
        if w["scale"].shape != (shape[0],) or w.get("shift", w["scale"]).shape != (shape[0],):
            raise ShapeError(f"affine {spec.id!r} needs per-channel scale/shift of length {shape[0]}")
        return shape
    if kind == "add":
        if len(in_shapes) < 2 or any(s != in_shapes[0] for s in in_shapes):
            raise ShapeError(f"add {spec.id!r} needs >= 2 inputs of equal shape, got {list(in_shapes)}")
        return in_shapes[0]
    if kind == "concat":
        axis = int(p.get("axis", 0))
        if len(in_shapes) < 2:
            raise GraphError(f"concat {spec.id!r} needs >= 2 inputs")
        rank = len(in_shapes[0])
        if not 0 <= axis < rank or any(len(s) != rank for s in in_shapes):
            raise ShapeError(f"concat {spec.id!r} axis {axis} invalid for {list(in_shapes)}")
        for s in in_shapes:
            if s[:axis] + s[axis + 1:] != in_shapes[0][:axis] + in_shapes[0][axis + 1:]:
                raise ShapeError(f"concat {spec.id!r} inputs disagree off axis {axis}")
        out = list(in_shapes[0])
        out[axis] = sum(s[axis] for s in in_shapes)
        return tuple(out)
    raise SchemaError(f"unknown layer kind {kind!r}")


def build_graph(specs: Sequence[LayerSpec]) -> NetworkGraph:
    """Validate a list of layer specs and return them as a topologically sorted graph."""
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise GraphError("duplicate layer ids")
    for spec in specs:
        if spec.kind not in ALL_KINDS:
            raise SchemaError(f"unknown layer kind {spec.kind!r}")
    if sum(s.kind == "input" for s in specs) != 1 or sum(s.kind == "output" for s in specs) != 1:
        raise GraphError("graph needs exactly one input and one output layer")
    ordered = _toposort(specs)
    shapes: dict[str, tuple[int, ...]] = {}
    for spec in ordered:
        shapes[spec.id] = infer_shape(spec, [shapes[i] for i in spec.inputs])
    out = next(s for s in ordered if s.kind == "output")
    if any(out.id in s.inputs for s in ordered):
        raise GraphError("output layer cannot feed other layers")
    for spec in ordered:
        if spec.kind != "output" and not any(spec.id in s.inputs for s in ordered):
            raise GraphError(f"layer {spec.id!r} output is never consumed")
    return NetworkGraph(tuple(ordered), shapes)


def _fold_batchnorm(gamma, beta, mean, var, eps: float) -> tuple[np.ndarray, np.ndarray]:
    gamma, beta, mean, var = (np.asarray(t, dtype=np.float64) for t in (gamma, beta, mean, var))
    scale = gamma / np.sqrt(var + eps)
    return as_tensor(scale), as_tensor(beta - mean * scale)


def graph_schema() -> dict:
    text = resources.files("evnet").joinpath("data/graph.schema.json").read_text()
    return json.loads(text)


def graph_parse(text: str, base_dir: str | Path = ".",
                tensors: Mapping[str, np.ndarray] | None = None) -> NetworkGraph:
    """Parse a JSON graph document.

    Weight paths are resolved relative to ``base_dir``. Entries in ``tensors``
    take precedence over files, which lets tests and the demo builder supply
    arrays directly.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"graph document is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, graph_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise SchemaError(f"graph document invalid at {path or '<root>'}: {exc.message}") from exc

    base_dir = Path(base_dir)
    table = dict(doc.get("weights", {}))
    loaded: dict[str, np.ndarray] = {}

    def fetch(name: str) -> np.ndarray:
        if name not in loaded:
            if tensors is not None and name in tensors:
                loaded[name] = as_tensor(tensors[name])
            elif name in table:
                loaded[name] = read_tensor(base_dir / table[name])
            else:
                raise SchemaError(f"weight {name!r} is not listed in the weights table")
        return loaded[name]

    specs = []
    for entry in doc["layers"]:
        kind = entry["kind"]
        params = dict(entry.get("params", {}))
        weights = {}
        for key in _WEIGHT_PARAMS.get(kind, ()):
            if key in params:
                weights[key] = fetch(params[key])
        if kind == "affine" and "batchnorm" in params:
            bn = params["batchnorm"]
            weights["scale"], weights["shift"] = _fold_batchnorm(
                *(fetch(bn[k]) for k in _BATCHNORM_KEYS), float(bn.get("eps", 1e-5)))
            weights["gamma"] = fetch(bn["gamma"])
        if kind in ("conv2d", "fully_connected") and "weight" not in weights:
            raise SchemaError(f"{kind} layer {entry['id']!r} has no weight")
        if kind == "affine" and "scale" not in weights:
            raise SchemaError(f"affine layer {entry['id']!r} needs scale or batchnorm")
        specs.append(LayerSpec(entry["id"], kind, tuple(entry.get("inputs", [])), params, weights))
    return build_graph(specs)


def load_graph(path: str | Path) -> NetworkGraph:
    path = Path(path)
    return graph_parse(path.read_text(), path.parent)


def dense_macs(graph: NetworkGraph) -> dict[str, int]:
    """Per-layer multiply-accumulate count of one conventional forward pass."""
    macs = {}
    for layer in graph.compute_layers():
        out = graph.shapes[layer.id]
        n_out = int(np.prod(out))
        if layer.kind == "conv2d":
            w = layer.weights["weight"]
            macs[layer.id] = n_out * int(np.prod(w.shape[1:]))
        elif layer.kind == "fully_connected":
            macs[layer.id] = int(layer.weights["weight"].size)
        elif layer.kind == "avg_pool":
            kh, kw = _window(layer.params)
            macs[layer.id] = n_out * kh * kw
        elif layer.kind == "affine":
            macs[layer.id] = n_out
        else:
            macs[layer.id] = 0
    return macs

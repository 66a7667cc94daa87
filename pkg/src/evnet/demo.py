"""The pinned demo CNN: conv-relu, conv-relu, max-pool, conv-relu, fully-connected.

Weights are drawn from ``numpy.random.default_rng(seed)`` with He scaling.
The shipped copy under ``evnet/data/demo`` was written by :func:`write_demo`
with the defaults below and is what the CLI and acceptance suite load.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .graph import NetworkGraph, graph_parse, load_graph
from .tensor import DTYPE, write_tensor

DEMO_SIZE = 32
DEMO_SEED = 7
DEMO_CLASSES = 10
# conv1 weights are scaled as if pixels were normalized by a 0.25 standard deviation
DEMO_INPUT_GAIN = 4.0


def demo_document(size: int = DEMO_SIZE, seed: int = DEMO_SEED,
                  input_gain: float = DEMO_INPUT_GAIN) -> tuple[dict, dict[str, np.ndarray]]:
    if size < 2 or size % 2:
        raise ValueError("demo input size must be even and >= 2")
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)

    half = size // 2
    tensors = {
        "conv1.w": (input_gain * he((8, 1, 3, 3), 9)).astype(DTYPE),
        "conv1.b": (0.05 * rng.standard_normal(8)).astype(DTYPE),
        "conv2.w": he((8, 8, 3, 3), 72),
        "conv2.b": (0.05 * rng.standard_normal(8)).astype(DTYPE),
        "conv3.w": he((16, 8, 3, 3), 72),
        "conv3.b": (0.05 * rng.standard_normal(16)).astype(DTYPE),
        "fc.w": he((DEMO_CLASSES, 16 * half * half), 16 * half * half),
        "fc.b": (0.05 * rng.standard_normal(DEMO_CLASSES)).astype(DTYPE),
    }
    layers = [
        {"id": "input", "kind": "input", "params": {"shape": [1, size, size]}},
        {"id": "conv1", "kind": "conv2d", "inputs": ["input"],
         "params": {"weight": "conv1.w", "bias": "conv1.b", "stride": 1, "padding": 1}},
        {"id": "relu1", "kind": "relu", "inputs": ["conv1"]},
        {"id": "conv2", "kind": "conv2d", "inputs": ["relu1"],
         "params": {"weight": "conv2.w", "bias": "conv2.b", "stride": 1, "padding": 1}},
        {"id": "relu2", "kind": "relu", "inputs": ["conv2"]},
        {"id": "pool", "kind": "max_pool", "inputs": ["relu2"], "params": {"window": 2, "stride": 2}},
        {"id": "conv3", "kind": "conv2d", "inputs": ["pool"],
         "params": {"weight": "conv3.w", "bias": "conv3.b", "stride": 1, "padding": 1}},
        {"id": "relu3", "kind": "relu", "inputs": ["conv3"]},
        {"id": "fc", "kind": "fully_connected", "inputs": ["relu3"],
         "params": {"weight": "fc.w", "bias": "fc.b"}},
        {"id": "output", "kind": "output", "inputs": ["fc"]},
    ]
    doc = {"name": f"demo-cnn-{size}", "layers": layers,
           "weights": {name: f"{name}.evts" for name in tensors}}
    return doc, tensors


def build_demo_graph(size: int = DEMO_SIZE, seed: int = DEMO_SEED) -> NetworkGraph:
    doc, tensors = demo_document(size, seed)
    return graph_parse(json.dumps(doc), tensors=tensors)


def write_demo(directory: str | Path, size: int = DEMO_SIZE, seed: int = DEMO_SEED) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc, tensors = demo_document(size, seed)
    for name, arr in tensors.items():
        write_tensor(directory / doc["weights"][name], arr)
    path = directory / "demo_cnn.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def demo_config_path() -> Path:
    return Path(str(resources.files("evnet").joinpath("data/demo/demo_cnn.json")))


def load_demo() -> NetworkGraph:
    return load_graph(demo_config_path())
